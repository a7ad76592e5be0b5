"""End-to-end recipes for every supported unit/topology cell.

Each step takes plain in-memory data (transcripts, features, alignments) and
returns the artifacts the next step needs; the command-line tool wraps these
with file I/O, and the acceptance suite calls them directly.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Optional, Sequence

import numpy as np

from . import decode as dec
from . import graphs, lm as lmmod, trainer, units
from .graphs import DenGraph, NumGraph
from .lm import NgramLm
from .units import ChenoneTree, Lexicon, UnitInventory

CONFIG_SECTION = "pipeline"


def default_schedule(unit_type: str, topology: str) -> str:
    """Pre-training everywhere except wordpiece HMM systems."""
    fam = graphs.family(topology)
    if unit_type == "chenone" and fam == "hmm":
        return "CE->MMI"
    if unit_type == "wordpiece" and fam == "hmm":
        return "MMI"
    return "ML->MMI"


@dataclass
class PipelineConfig:
    unit_type: str = "wordpiece"
    topology: str = "chain"
    stride: int = 0  # 0: 8 for wordpiece systems, 4 otherwise
    den_lm_order: int = 0  # 0: 3 for wordpiece systems, 4 otherwise
    boost: float = 0.5
    kappa: float = 1.0
    specaugment: str = "large"
    schedule: str = ""  # empty: see default_schedule
    epochs: str = ""  # comma-separated per stage; empty: 5 per stage
    tolerance: float = 5.0
    seed: int = 0
    hidden: int = 64
    lr: float = 0.5
    batch_size: int = 8
    flat_start_epochs: int = 2
    p_sil: float = 0.2
    wordpiece_vocab: int = 64
    bichar_units: int = 30
    chenone_leaves: int = 40
    word_lm_order: int = 2
    beam: float = float("inf")
    frame_ms: float = 10.0
    workers: int = 1

    def __post_init__(self):
        if not self.stride:
            self.stride = 8 if self.unit_type == "wordpiece" else 4
        if not self.den_lm_order:
            self.den_lm_order = 3 if self.unit_type == "wordpiece" else 4
        if not self.schedule:
            self.schedule = default_schedule(self.unit_type, self.topology)
        graphs.check_cell(self.unit_type, self.topology, self.schedule)
        if self.specaugment not in trainer.POLICIES:
            raise ValueError(f"unknown specaugment policy {self.specaugment!r}")
        n = len(trainer.SCHEDULES[self.schedule])
        if not self.epochs:
            self.epochs = ",".join(["5"] * n)
        if len(self.epoch_counts) != n:
            raise ValueError(f"schedule {self.schedule} needs {n} epoch counts, got {self.epochs!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def epoch_counts(self) -> tuple[int, ...]:
        return tuple(int(x) for x in str(self.epochs).split(","))

    @property
    def hmm(self) -> bool:
        return graphs.family(self.topology) == "hmm"

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            schedule=self.schedule,
            epochs=self.epoch_counts,
            lr=self.lr,
            batch_size=self.batch_size,
            seed=self.seed,
            boost=self.boost,
            kappa=self.kappa,
            specaugment=self.specaugment,
            hidden=self.hidden,
            workers=self.workers,
            flat_start_epochs=self.flat_start_epochs if self.hmm and self.unit_type != "chenone" else 0,
        )

    # ------------------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp[CONFIG_SECTION] = {k: str(v) for k, v in asdict(self).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, overrides: Optional[Mapping[str, str]] = None) -> "PipelineConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if CONFIG_SECTION not in cp:
            raise ValueError(f"config has no [{CONFIG_SECTION}] section")
        raw = dict(cp[CONFIG_SECTION])
        raw.update(overrides or {})
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(raw) - set(types))
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for k, v in raw.items():
            t = types[k]
            kwargs[k] = {"int": int, "float": float, "str": str}[t if isinstance(t, str) else t.__name__](v)
        return cls(**kwargs)

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Corpus:
    """Utterances keyed by id; features are T_in x F input frames."""

    transcripts: dict[str, list[str]]
    features: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return sorted(self.transcripts)

    def lines(self) -> list[str]:
        return [" ".join(self.transcripts[u]) for u in self.ids]

    def words(self) -> list[list[str]]:
        return [self.transcripts[u] for u in self.ids]


# ---------------------------------------------------------------------------
# units


@dataclass
class UnitSet:
    inv: UnitInventory
    tree: Optional[ChenoneTree] = None


def build_units(
    cfg: PipelineConfig,
    corpus: Corpus,
    alignments: Optional[Mapping[str, Sequence[tuple[int, int, int]]]] = None,
    src_inv: Optional[UnitInventory] = None,
) -> UnitSet:
    """Unit inventory for the cell, with the topology's extra units.

    Chenone systems need per-label-position character alignments (at this
    system's frame rate) from a source character system ``src_inv``.
    """
    lines = corpus.lines()
    tree = None
    if cfg.unit_type == "wordpiece":
        inv = units.train_wordpiece_vocab(lines, cfg.wordpiece_vocab, silence=graphs.has_silence("wordpiece", cfg.topology))
    elif cfg.unit_type == "mono-char":
        inv = units.build_char_inventory(lines)
    elif cfg.unit_type == "bi-char":
        inv = units.cluster_bichar(lines, cfg.bichar_units)
    else:
        if alignments is None or src_inv is None:
            raise ValueError("chenone units need character alignments and their inventory")
        frames = []
        for u in corpus.ids:
            if u not in alignments:
                raise ValueError(f"no alignment for utterance {u}")
            feats = trainer.frame_stride(corpus.features[u], cfg.stride)
            frames.extend(graphs.chenone_frame_stats(alignments[u], corpus.transcripts[u], src_inv, feats))
        inv, tree = units.build_chenone_tree(frames, target_leaves=cfg.chenone_leaves)
    return UnitSet(inv.with_topology(cfg.topology), tree)


def chenone_alignments(
    alignments: Mapping[str, Sequence[tuple[int, int, int]]],
    corpus: Corpus,
    src_inv: UnitInventory,
    us: UnitSet,
) -> dict[str, list[tuple[int, int, int]]]:
    return {
        u: graphs.chenone_segments(alignments[u], corpus.transcripts[u], src_inv, us.inv, us.tree) for u in corpus.ids
    }


# ---------------------------------------------------------------------------
# LMs and graphs


def token_lm(
    cfg: PipelineConfig,
    corpus: Corpus,
    us: UnitSet,
    alignments: Optional[Mapping[str, Sequence[tuple[int, int, int]]]] = None,
    src_inv: Optional[UnitInventory] = None,
) -> NgramLm:
    """Denominator token LM. Chenone systems take silence placement from the
    character alignments; the others insert silence at random."""
    if cfg.unit_type == "wordpiece":
        seqs = graphs.wordpiece_lm_sequences(corpus.words(), us.inv, cfg.p_sil, cfg.seed)
    elif cfg.unit_type == "chenone":
        if alignments is None or src_inv is None:
            raise ValueError("chenone token LM needs character alignments")
        seqs = [graphs.alignment_lm_sequence(alignments[u], corpus.transcripts[u], src_inv) for u in corpus.ids]
    else:
        seqs = graphs.char_lm_sequences(corpus.words(), cfg.p_sil, cfg.seed)
    return lmmod.estimate_ngram(seqs, cfg.den_lm_order)


def build_den(cfg: PipelineConfig, token_model: NgramLm, us: UnitSet) -> DenGraph:
    den = graphs.build_den(token_model, us.inv, cfg.topology, us.tree)
    den.metadata["config_hash"] = cfg.hash()
    return den


def build_nums(
    cfg: PipelineConfig,
    corpus: Corpus,
    us: UnitSet,
    alignments: Optional[Mapping[str, Sequence[tuple[int, int, int]]]] = None,
) -> dict[str, NumGraph]:
    """Numerators; chenone systems need chenone-relabeled alignments."""
    out = {}
    sil_prob = cfg.p_sil if cfg.hmm and us.inv.silence is not None and cfg.p_sil > 0 else None
    for u in corpus.ids:
        ali = alignments.get(u) if alignments is not None else None
        num = graphs.build_num(
            u, corpus.transcripts[u], us.inv, cfg.topology, alignment=ali, tolerance=cfg.tolerance, sil_prob=sil_prob
        )
        num.metadata["config_hash"] = cfg.hash()
        out[u] = num
    return out


def word_lm(cfg: PipelineConfig, corpus: Corpus) -> NgramLm:
    return lmmod.estimate_ngram(corpus.words(), cfg.word_lm_order)


def lexicon(corpus_words: Sequence[str], us: UnitSet) -> Lexicon:
    return units.build_lexicon(corpus_words, us.inv, us.tree)


def decode_graph(cfg: PipelineConfig, wlm: NgramLm, lex: Lexicon, us: UnitSet) -> dec.DecodeGraph:
    g = dec.build_decode_graph(wlm, lex, us.inv, cfg.topology)
    g.metadata["config_hash"] = cfg.hash()
    return g


# ---------------------------------------------------------------------------
# training, alignment, decoding


def frame_targets(segments: Sequence[tuple[int, int, int]]) -> np.ndarray:
    T = segments[-1][2]
    out = np.empty(T, dtype=np.int64)
    for u, s, e in segments:
        out[s:e] = u
    return out


def train_items(
    cfg: PipelineConfig,
    corpus: Corpus,
    us: UnitSet,
    nums: Mapping[str, NumGraph],
    alignments: Optional[Mapping[str, Sequence[tuple[int, int, int]]]] = None,
) -> list[trainer.TrainItem]:
    items = []
    for u in corpus.ids:
        feats = corpus.features[u]
        T = len(feats) // cfg.stride
        ali = None
        if alignments is not None and u in alignments:
            ali = frame_targets(alignments[u])
            if len(ali) != T:
                raise ValueError(f"utterance {u}: alignment covers {len(ali)} frames, features give {T}")
        labels = None
        if us.inv.unit_type != "chenone":
            labels = graphs.transcript_labels(corpus.transcripts[u], us.inv)[0]
        items.append(trainer.TrainItem(u, feats, nums.get(u), ali, labels))
    return items


def train(
    cfg: PipelineConfig,
    corpus: Corpus,
    us: UnitSet,
    den: Optional[DenGraph],
    nums: Mapping[str, NumGraph],
    alignments: Optional[Mapping[str, Sequence[tuple[int, int, int]]]] = None,
    on_epoch=None,
) -> tuple[trainer.Checkpoint, list[trainer.EpochLog]]:
    feat_dim = next(iter(corpus.features.values())).shape[1]
    items = train_items(cfg, corpus, us, nums, alignments)
    tc = cfg.train_config()
    ckpt, log = trainer.train(
        items, den, tc, len(us.inv), feat_dim, cfg.stride, on_epoch=on_epoch, silence=us.inv.silence
    )
    ckpt.config_hash = cfg.hash()
    return ckpt, log


def align(
    ckpt: trainer.Checkpoint, corpus: Corpus, us: UnitSet, nums: Mapping[str, NumGraph]
) -> dict[str, dec.Alignment]:
    cfg = ckpt.loss_config()
    return {u: dec.force_align(ckpt.model.logits(corpus.features[u]), nums[u], cfg, us.inv) for u in corpus.ids}


def alignment_segments(alis: Mapping[str, dec.Alignment], inv: UnitInventory) -> dict[str, list[tuple[int, int, int]]]:
    return {u: dec.label_segments(a, inv) for u, a in alis.items()}


def alignment_hypotheses(
    alis: Mapping[str, dec.Alignment],
    corpus: Corpus,
    us: UnitSet,
    alignments: Optional[Mapping[str, Sequence[tuple[int, int, int]]]] = None,
) -> dict[str, dec.Hypothesis]:
    """Word spans implied by forced alignments (for time-stamp scoring).

    Chenone numerators take their labels from ``alignments`` (silences
    included), so word boundaries are located on that label sequence.
    """
    out = {}
    for u, a in alis.items():
        words = corpus.transcripts[u]
        if us.inv.unit_type == "chenone":
            labels = [x for x, _, _ in alignments[u]]
            if us.inv.blank is not None:
                labels = graphs.dedup(labels)
            speech = [i for i, x in enumerate(labels) if x != us.inv.silence]
            bounds, k = [], 0
            for w in words:
                bounds.append(speech[k])
                k += len(w)
            bounds.append(speech[k - 1] + 1)
        else:
            bounds = graphs.transcript_labels(words, us.inv)[1]
        out[u] = dec.Hypothesis(list(words), dec.alignment_word_times(a, bounds), 0.0)
    return out


def decode(
    cfg: PipelineConfig, ckpt: trainer.Checkpoint, graph: dec.DecodeGraph, corpus: Corpus, us: UnitSet
) -> dict[str, dec.Hypothesis]:
    lcfg = ckpt.loss_config()
    return {
        u: dec.viterbi_decode(ckpt.model.logits(corpus.features[u]), graph, lcfg, us.inv, cfg.beam)
        for u in sorted(corpus.features)
    }
