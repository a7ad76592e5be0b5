"""Toy acoustic scorer, feature/checkpoint formats, augmentation and the training loop."""

from __future__ import annotations

import hashlib
import io
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import loss as lossmod
from .loss import LossConfig, LossResult
from .wfst import NoPathError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"LFAM"
CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1

# schedule -> ordered stages
SCHEDULES = {
    "ML": ("ML",),
    "CE": ("CE",),
    "MMI": ("MMI",),
    "ML->MMI": ("ML", "MMI"),
    "CE->MMI": ("CE", "MMI"),
}
BOOST_GRID = (0.0, 0.3, 0.5, 1.0)


# ---------------------------------------------------------------------------
# feature files


def features_to_bytes(feats: np.ndarray) -> bytes:
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise ValueError("features must be a T x F matrix")
    T, F = feats.shape
    return FEATURE_MAGIC + struct.pack("<II", T, F) + np.ascontiguousarray(feats, dtype="<f4").tobytes()


def features_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != FEATURE_MAGIC:
        raise ValueError("not a feature file (bad magic)")
    T, F = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * T * F:
        raise ValueError(f"feature file truncated: expected {4 * T * F} bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(T, F).astype(np.float32)


def write_features(path: str, feats: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(features_to_bytes(feats))


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return features_from_bytes(fh.read())


def read_transcripts(text: str) -> dict[str, list[str]]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        utt, _, words = line.partition("\t")
        out[utt] = words.split()
    return out


def write_transcripts(items: dict[str, Sequence[str]]) -> str:
    return "".join(f"{u}\t{' '.join(items[u])}\n" for u in sorted(items))


# ---------------------------------------------------------------------------
# augmentation and striding


@dataclass(frozen=True)
class SpecAugmentPolicy:
    freq_width: int
    n_freq: int
    time_width: int
    n_time: int
    max_time_fraction: float

    def __post_init__(self):
        if min(self.freq_width, self.n_freq, self.time_width, self.n_time) < 0:
            raise ValueError("mask sizes must be non-negative")
        if not 0.0 <= self.max_time_fraction <= 1.0:
            raise ValueError("max_time_fraction must be in [0, 1]")


POLICIES = {
    "none": None,
    "ld": SpecAugmentPolicy(freq_width=27, n_freq=2, time_width=100, n_time=2, max_time_fraction=0.2),
    "large": SpecAugmentPolicy(freq_width=27, n_freq=2, time_width=30, n_time=10, max_time_fraction=0.2),
}


def spec_augment(features: np.ndarray, policy: Optional[SpecAugmentPolicy], seed: int) -> np.ndarray:
    """Zero random frequency bands and time spans. The total number of masked
    frames never exceeds ``max_time_fraction * T_in``."""
    if policy is None:
        return features
    out = np.array(features, copy=True)
    T, F = out.shape
    rng = np.random.default_rng(seed)
    for _ in range(policy.n_freq):
        w = min(int(rng.integers(0, policy.freq_width + 1)), F)
        f0 = int(rng.integers(0, F - w + 1))
        out[:, f0 : f0 + w] = 0.0
    budget = int(np.floor(policy.max_time_fraction * T))
    masked = np.zeros(T, dtype=bool)
    for _ in range(policy.n_time):
        w = int(rng.integers(0, policy.time_width + 1))
        t0 = int(rng.integers(0, max(T - w, 0) + 1))
        w = min(w, budget - int(masked.sum()), T - t0)
        if w <= 0:
            continue
        masked[t0 : t0 + w] = True
    out[masked] = 0.0
    return out


def frame_stride(features: np.ndarray, stride: int) -> np.ndarray:
    """Concatenate each run of ``stride`` input frames; the remainder is dropped."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    T, F = features.shape
    if T < stride:
        raise ValueError(f"utterance has {T} frames, fewer than the stride {stride}")
    n = T // stride
    return np.asarray(features[: n * stride]).reshape(n, stride * F)


# ---------------------------------------------------------------------------
# model


class ToyScorer:
    """Two-layer tanh perceptron over stride-stacked frames.

    The output layer starts at zero, so every unit scores equally at the first
    step (a flat start: initial occupancies come from the graphs alone).
    """

    def __init__(self, feat_dim: int, hidden: int, num_units: int, stride: int, seed: int = 0):
        self.feat_dim, self.hidden, self.num_units, self.stride = feat_dim, hidden, num_units, stride
        rng = np.random.default_rng(seed)
        d = stride * feat_dim
        self.params = {
            "W1": rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden)),
            "b1": np.zeros(hidden),
            "W2": np.zeros((hidden, num_units)),
            "b2": np.zeros(num_units),
        }

    def forward(self, x: np.ndarray):
        """``x``: (..., stride*F). Returns logits and the hidden activations."""
        p = self.params
        h = np.tanh(x @ p["W1"] + p["b1"])
        return h @ p["W2"] + p["b2"], h

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.forward(frame_stride(np.asarray(features, dtype=np.float64), self.stride))[0]

    def backward(self, x: np.ndarray, h: np.ndarray, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for rows of ``x`` (padded rows must carry zero ``dlogits``)."""
        p = self.params
        x2 = x.reshape(-1, x.shape[-1])
        h2 = h.reshape(-1, h.shape[-1])
        g2 = dlogits.reshape(-1, dlogits.shape[-1])
        dh = (g2 @ p["W2"].T) * (1.0 - h2 * h2)
        return {"W1": x2.T @ dh, "b1": dh.sum(0), "W2": h2.T @ g2, "b2": g2.sum(0)}


@dataclass
class Checkpoint:
    model: ToyScorer
    stage: str = ""
    epoch: int = 0
    kappa: float = 1.0
    log_priors: Optional[np.ndarray] = None
    config_hash: str = ""

    def to_bytes(self) -> bytes:
        """Layout: magic "LFCK", u32 version, u32 U, H, F, stride, epoch, then
        length-prefixed UTF-8 stage and config hash, f64 kappa, u8 has-priors,
        then little-endian f64 arrays W1, b1, W2, b2 and the priors if present."""
        m = self.model
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<6I", CHECKPOINT_VERSION, m.num_units, m.hidden, m.feat_dim, m.stride, self.epoch))
        for s in (self.stage, self.config_hash):
            b = s.encode("utf-8")
            buf.write(struct.pack("<I", len(b)) + b)
        buf.write(struct.pack("<dB", self.kappa, self.log_priors is not None))
        for k in ("W1", "b1", "W2", "b2"):
            buf.write(np.ascontiguousarray(m.params[k], dtype="<f8").tobytes())
        if self.log_priors is not None:
            buf.write(np.ascontiguousarray(self.log_priors, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint (bad magic)")
        version, U, H, F, stride, epoch = struct.unpack("<6I", data[4:28])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 28
        strings = []
        for _ in range(2):
            (n,) = struct.unpack("<I", data[pos : pos + 4])
            strings.append(data[pos + 4 : pos + 4 + n].decode("utf-8"))
            pos += 4 + n
        kappa, has_priors = struct.unpack("<dB", data[pos : pos + 9])
        pos += 9
        model = ToyScorer(F, H, U, stride)
        for k, shape in (("W1", (stride * F, H)), ("b1", (H,)), ("W2", (H, U)), ("b2", (U,))):
            n = int(np.prod(shape))
            model.params[k] = np.frombuffer(data[pos : pos + 8 * n], dtype="<f8").reshape(shape).astype(np.float64)
            pos += 8 * n
        priors = None
        if has_priors:
            priors = np.frombuffer(data[pos : pos + 8 * U], dtype="<f8").astype(np.float64)
            pos += 8 * U
        if pos != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return cls(model, strings[0], epoch, kappa, priors, strings[1])

    def loss_config(self, mode: str = "MMI", boost: float = 0.0) -> LossConfig:
        return LossConfig(kappa=self.kappa, boost=boost, log_priors=self.log_priors, mode=mode)


# ---------------------------------------------------------------------------
# batching


def pad_batch(mats: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length matrices into (B, T_max, D) with a validity mask."""
    T = max(len(m) for m in mats)
    D = mats[0].shape[1]
    out = np.zeros((len(mats), T, D))
    mask = np.zeros((len(mats), T), dtype=bool)
    for i, m in enumerate(mats):
        out[i, : len(m)] = m
        mask[i, : len(m)] = True
    return out, mask


@dataclass
class TrainItem:
    utt_id: str
    features: np.ndarray
    num: object = None  # NumGraph / compiled graph for ML and MMI
    alignment: Optional[Sequence[int]] = None  # frame-level unit ids for CE
    labels: Optional[Sequence[int]] = None  # transcript labels, for the equal-alignment flat start


@dataclass
class TrainConfig:
    schedule: str = "MMI"
    epochs: tuple = (5,)
    lr: float = 0.5
    clip: float = 5.0
    batch_size: int = 8
    seed: int = 0
    boost: float = 0.0
    kappa: float = 1.0
    specaugment: str = "none"
    hidden: int = 64
    workers: int = 1
    prior_subset: int = 100
    flat_start_epochs: int = 0

    def stages(self) -> list[tuple[str, int]]:
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        names = SCHEDULES[self.schedule]
        if len(self.epochs) != len(names):
            raise ValueError(f"schedule {self.schedule} needs {len(names)} epoch counts")
        return list(zip(names, self.epochs))

    def hash(self) -> str:
        return hashlib.sha256(repr(sorted(self.__dict__.items())).encode()).hexdigest()[:16]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Optional[Checkpoint]):
        super().__init__(message)
        self.last_good = last_good


def equal_alignment(labels: Sequence[int], T: int) -> np.ndarray:
    """Spread ``labels`` evenly over ``T`` frames."""
    L = len(labels)
    if not 0 < L <= T:
        raise ValueError(f"cannot spread {L} labels over {T} frames")
    return np.asarray(labels, dtype=np.int64)[(np.arange(T) * L) // T]


@dataclass
class EpochLog:
    stage: str
    epoch: int
    objective: float  # per frame
    frames: int
    skipped: int


def utterance_loss(mode: str, cfg: LossConfig, logits: np.ndarray, item: TrainItem, den) -> LossResult:
    if mode == "MMI":
        return lossmod.lfbmmi_loss(item.num, den, logits, cfg)
    if mode == "ML":
        return lossmod.ml_loss(item.num, logits)
    return lossmod.ce_loss(item.alignment, logits)


def batch_losses(model, mode, cfg, items, den, features, workers=1):
    """Per-utterance losses on one padded batch: (results, padded input, hidden, mask)."""
    x, mask = pad_batch([frame_stride(f, model.stride) for f in features])
    logits, h = model.forward(x)
    if not np.isfinite(logits[mask]).all():
        raise FloatingPointError("non-finite logits")

    def one(i):
        T = int(mask[i].sum())
        try:
            return utterance_loss(mode, cfg, logits[i, :T], items[i], den)
        except NoPathError as e:
            logger.warning("skipping %s: %s", items[i].utt_id, e)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, range(len(items))))
    else:
        results = [one(i) for i in range(len(items))]
    return results, x, h, mask


def train(
    items: Sequence[TrainItem],
    den,
    cfg: TrainConfig,
    num_units: int,
    feat_dim: int,
    stride: int,
    model: Optional[ToyScorer] = None,
    on_epoch: Optional[Callable[[Checkpoint, EpochLog], None]] = None,
    stage_hook: Optional[Callable[[str, ToyScorer], Sequence[TrainItem]]] = None,
    silence: Optional[int] = None,
) -> tuple[Checkpoint, list[EpochLog]]:
    """Mini-batch SGD on the schedule's stages.

    MMI and ML are maximized, CE minimized; gradients are normalized by the
    number of valid frames in the batch and clipped to a global norm of
    ``cfg.clip``. Entering an MMI stage after ML/CE pre-training estimates
    priors on the first ``prior_subset`` utterances (by id) and switches to
    raw-logit scoring with the configured acoustic scale.

    With ``cfg.flat_start_epochs`` and no initial model, an ML or MMI schedule
    starts with that many CE epochs on equal alignments of each item's
    ``labels``. Silence never occurs in those alignments, so its output row is
    then reset to zero rather than keeping the negative bias CE gave it; the
    sequence stage learns silence from scratch.
    """
    if den is not None and not isinstance(den, lossmod.CompiledGraph):
        den = lossmod.CompiledGraph(getattr(den, "fst", den))
    items = list(items)
    stages = cfg.stages()
    if cfg.flat_start_epochs and model is None and stages[0][0] in ("ML", "MMI"):
        items = [
            TrainItem(it.utt_id, it.features, it.num, equal_alignment(it.labels, len(it.features) // stride), it.labels)
            for it in items
        ]
        stages = [("CE", cfg.flat_start_epochs)] + stages
    flat_start = len(stages) > len(cfg.stages())
    model = model or ToyScorer(feat_dim, cfg.hidden, num_units, stride, seed=cfg.seed)
    policy = POLICIES[cfg.specaugment]
    log: list[EpochLog] = []
    ckpt = Checkpoint(model, config_hash=cfg.hash())
    epoch_counter = 0
    loss_cfg = LossConfig(kappa=cfg.kappa, boost=cfg.boost)
    for stage_idx, (mode, n_epochs) in enumerate(stages):
        if flat_start and stage_idx == 1 and silence is not None:
            model.params["W2"][:, silence] = 0.0
            model.params["b2"][silence] = 0.0
        if stage_hook is not None:
            items = list(stage_hook(mode, model))
        if mode == "CE" and any(it.alignment is None for it in items):
            raise ValueError("CE training requires frame alignments for every utterance")
        if mode in ("ML", "MMI") and any(it.num is None for it in items):
            raise ValueError(f"{mode} training requires numerator graphs")
        if mode == "MMI" and den is None:
            raise ValueError("MMI training requires a denominator graph")
        priors = None
        if mode == "MMI" and stage_idx > int(flat_start):
            subset = sorted(items, key=lambda it: it.utt_id)[: cfg.prior_subset]
            priors = lossmod.estimate_priors([model.logits(it.features) for it in subset])
            loss_cfg = LossConfig(kappa=cfg.kappa, boost=cfg.boost, log_priors=priors)
        compiled = [
            TrainItem(it.utt_id, it.features, _maybe_compile(it.num), it.alignment) for it in items
        ]
        for _ in range(n_epochs):
            rng = np.random.default_rng([cfg.seed, epoch_counter])
            order = rng.permutation(len(compiled))
            total_obj, total_frames, skipped = 0.0, 0, 0
            for b0 in range(0, len(order), cfg.batch_size):
                idx = order[b0 : b0 + cfg.batch_size]
                batch = [compiled[i] for i in idx]
                feats = [
                    spec_augment(np.asarray(it.features, dtype=np.float64), policy, int(rng.integers(2**31)))
                    for it in batch
                ]
                try:
                    results, x, h, mask = batch_losses(model, mode, loss_cfg, batch, den, feats, cfg.workers)
                except FloatingPointError as e:
                    raise TrainingDiverged(f"{e} in stage {mode}, epoch {epoch_counter + 1}", ckpt) from None
                frames = int(sum(mask[i].sum() for i, r in enumerate(results) if r is not None))
                skipped += sum(r is None for r in results)
                if frames == 0:
                    continue
                sign = -1.0 if mode == "CE" else 1.0
                dlogits = np.zeros(mask.shape + (model.num_units,))
                obj = 0.0
                for i, r in enumerate(results):
                    if r is None:
                        continue
                    T = int(mask[i].sum())
                    scale = T if mode == "CE" else 1.0  # CE objective is already a per-frame mean
                    obj += r.objective * scale
                    dlogits[i, :T] = sign * r.grad * scale / frames
                if not np.isfinite(obj):
                    raise TrainingDiverged(f"non-finite objective in stage {mode}", ckpt)
                grads = model.backward(x, h, dlogits)
                norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                factor = cfg.lr * (min(1.0, cfg.clip / norm) if norm > 0 else 1.0)
                for k, g in grads.items():
                    model.params[k] = model.params[k] + factor * g
                total_obj += obj
                total_frames += frames
            epoch_counter += 1
            entry = EpochLog(mode, epoch_counter, total_obj / max(total_frames, 1), total_frames, skipped)
            log.append(entry)
            logger.info("%s epoch %d objective/frame %.6f skipped %d", mode, epoch_counter, entry.objective, skipped)
            ckpt = Checkpoint(
                model,
                stage=mode,
                epoch=epoch_counter,
                kappa=cfg.kappa if mode == "MMI" else 1.0,
                log_priors=priors,
                config_hash=cfg.hash(),
            )
            ckpt = Checkpoint.from_bytes(ckpt.to_bytes())  # snapshot
            if on_epoch is not None:
                on_epoch(ckpt, entry)
    return ckpt, log


def _maybe_compile(num):
    if num is None or isinstance(num, lossmod.CompiledGraph):
        return num
    return lossmod.CompiledGraph(getattr(num, "fst", num))
