"""Forward-backward over unit acceptors and the LF-bMMI / ML / CE objectives.

Scores are natural-log values. Graphs are compiled once into flat arc arrays;
each frame is one vectorized sweep over the arcs, with grouped log-sum-exp
(max-shifted) collecting arcs per destination (forward) or source (backward).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .wfst import EPSILON, NEG_INF, Fst, NoPathError

MODES = ("MMI", "ML", "CE")


@dataclass
class LossConfig:
    kappa: float = 1.0
    boost: float = 0.0
    log_priors: Optional[np.ndarray] = None
    mode: str = "MMI"

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")
        if self.boost < 0:
            raise ValueError("boost must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.log_priors is not None:
            lp = np.asarray(self.log_priors, dtype=np.float64)
            m = lp.max()
            if abs(m + np.log(np.exp(lp - m).sum())) > 1e-6:
                raise ValueError("log_priors must be a normalized log distribution")
            self.log_priors = lp


@dataclass
class LossResult:
    objective: float
    grad: np.ndarray
    num_post: Optional[np.ndarray] = None


class CompiledGraph:
    """Arc arrays of an epsilon-free acceptor (input labels = unit id + 1)."""

    def __init__(self, fst: Fst):
        if fst.is_empty():
            raise NoPathError("empty graph")
        arr = fst.to_arrays()
        if np.any(arr["ilabel"] == EPSILON):
            raise ValueError("graph has epsilon input arcs; remove them first")
        self.num_states = fst.num_states
        self.start = fst.start
        self.src = arr["src"]
        self.dst = arr["dst"]
        self.unit = arr["ilabel"] - 1
        self.olabel = arr["olabel"]
        self.weight = arr["weight"]
        self.finals = arr["finals"]
        self.by_dst = _Groups(self.dst)
        self.by_src = _Groups(self.src)
        self.unit_groups_in_src_order = _Groups(self.unit[self.by_src.order])

    @property
    def max_unit(self) -> int:
        return int(self.unit.max()) if len(self.unit) else -1


class _Groups:
    """Precomputed sort order for grouped reductions over arcs."""

    def __init__(self, keys: np.ndarray):
        self.order = np.argsort(keys, kind="stable")
        sorted_keys = keys[self.order]
        if len(sorted_keys):
            bounds = np.flatnonzero(np.diff(sorted_keys)) + 1
            self.starts = np.concatenate([[0], bounds])
            self.keys = sorted_keys[self.starts]
            self.counts = np.diff(np.concatenate([self.starts, [len(sorted_keys)]]))
        else:
            self.starts = self.keys = self.counts = np.zeros(0, dtype=np.int64)

    def logsumexp(self, vals: np.ndarray, n: int) -> np.ndarray:
        return self.logsumexp_sorted(vals[self.order], n)

    def logsumexp_sorted(self, v: np.ndarray, n: int) -> np.ndarray:
        """Like :meth:`logsumexp` for values already permuted by ``order``."""
        out = np.full(n, NEG_INF)
        if not len(v):
            return out
        m = np.maximum.reduceat(v, self.starts)
        safe = np.where(np.isfinite(m), m, 0.0)
        s = np.add.reduceat(np.exp(v - np.repeat(safe, self.counts)), self.starts)
        with np.errstate(divide="ignore"):
            out[self.keys] = safe + np.log(s)
        return out


def _compiled(graph) -> CompiledGraph:
    if isinstance(graph, CompiledGraph):
        return graph
    fst = getattr(graph, "fst", graph)
    return CompiledGraph(fst)


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x) if len(x) else NEG_INF
    if not np.isfinite(m):
        return NEG_INF
    return float(m + np.log(np.exp(x - m).sum()))


def _check_scores(scores: np.ndarray) -> None:
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ValueError("scores must be a T x U matrix with T >= 1")
    bad = ~np.isfinite(scores)
    if bad.any():
        t = int(np.flatnonzero(bad.any(axis=1))[0])
        raise ValueError(f"non-finite score at frame {t}")


def forward_backward(graph, scores: np.ndarray, frame_bonus: Optional[np.ndarray] = None):
    """Log-total over all length-T paths and exact posterior unit occupancies.

    ``scores`` are already adjusted (see :func:`adjust_scores`). Path score =
    sum of arc weights, final weight, and per-frame ``scores[t, unit]`` (plus
    ``frame_bonus[t, unit]`` when given).
    """
    g = _compiled(graph)
    scores = np.asarray(scores, dtype=np.float64)
    _check_scores(scores)
    T, U = scores.shape
    S = g.num_states
    if g.max_unit >= U:
        raise ValueError(f"graph uses unit {g.max_unit} but scores have only {U} columns")
    if frame_bonus is not None:
        scores = scores + frame_bonus
    emit = scores[:, g.unit] + g.weight  # T x A
    # arcs are laid out once in destination order for the forward pass and in
    # source order for the backward pass, so each frame's grouped log-sum-exp
    # works on contiguous runs
    fwd, bwd = g.by_dst, g.by_src
    src_f = g.src[fwd.order]
    emit_f = emit[:, fwd.order]
    alpha = np.full((T + 1, S), NEG_INF)
    alpha[0, g.start] = 0.0
    for t in range(T):
        alpha[t + 1] = fwd.logsumexp_sorted(np.take(alpha[t], src_f) + emit_f[t], S)
        if not np.isfinite(alpha[t + 1]).any():
            raise NoPathError(f"no path survives frame {t} of {T}")
    logz = _logsumexp(alpha[T] + g.finals)
    if not np.isfinite(logz):
        raise NoPathError(f"no path of length {T} ends in a final state")
    dst_b = g.dst[bwd.order]
    emit_b = emit[:, bwd.order]
    beta = np.full((T + 1, S), NEG_INF)
    beta[T] = g.finals
    for t in range(T - 1, -1, -1):
        beta[t] = bwd.logsumexp_sorted(emit_b[t] + np.take(beta[t + 1], dst_b), S)
    post = np.take(alpha[:T], g.src[bwd.order], axis=1)
    post += emit_b
    post += np.take(beta[1:], dst_b, axis=1)
    post -= logz
    np.exp(post, out=post)
    occ = np.zeros((T, U))
    grp = g.unit_groups_in_src_order
    if len(grp.starts):
        occ[:, grp.keys] = np.add.reduceat(post[:, grp.order], grp.starts, axis=1)
    return float(logz), occ


def viterbi(graph, scores: np.ndarray, beam: float = np.inf):
    """Best length-T path under the tropical semiring: (score, arc index per frame).

    Ties go to the lexicographically smallest state sequence, then to the
    smallest arc index. A finite ``beam`` drops states scoring more than
    ``beam`` below the frame's best before expanding them.
    """
    g = _compiled(graph)
    scores = np.asarray(scores, dtype=np.float64)
    _check_scores(scores)
    T = scores.shape[0]
    S = g.num_states
    if g.max_unit >= scores.shape[1]:
        raise ValueError(f"graph uses unit {g.max_unit} but scores have only {scores.shape[1]} columns")
    emit = scores[:, g.unit] + g.weight
    arc_ids = np.arange(len(g.src))
    delta = np.full(S, NEG_INF)
    delta[g.start] = 0.0
    rank = np.full(S, S, dtype=np.int64)
    rank[g.start] = 0
    back = np.full((T, S), -1, dtype=np.int64)
    for t in range(T):
        if np.isfinite(beam):
            delta = np.where(delta >= delta.max() - beam, delta, NEG_INF)
        vals = delta[g.src] + emit[t]
        live = np.isfinite(vals)
        if not live.any():
            raise NoPathError(f"no path survives frame {t} of {T}")
        ids = arc_ids[live]
        order = ids[np.lexsort((ids, rank[g.src[ids]], -vals[ids], g.dst[ids]))]
        d_sorted = g.dst[order]
        first = np.concatenate([[True], d_sorted[1:] != d_sorted[:-1]])
        win = order[first]
        dests = g.dst[win]
        delta = np.full(S, NEG_INF)
        delta[dests] = vals[win]
        back[t, dests] = win
        new_rank = np.full(S, S, dtype=np.int64)
        new_rank[dests[np.lexsort((dests, rank[g.src[win]]))]] = np.arange(len(dests))
        rank = new_rank
    total = delta + g.finals
    if not np.isfinite(total).any():
        raise NoPathError(f"no path of length {T} ends in a final state")
    cands = np.flatnonzero(total == total.max())
    best = int(cands[np.argmin(rank[cands])])
    arcs = np.zeros(T, dtype=np.int64)
    s = best
    for t in range(T - 1, -1, -1):
        a = back[t, s]
        arcs[t] = a
        s = g.src[a]
    return float(total[best]), arcs


# ---------------------------------------------------------------------------
# objectives


def adjust_scores(logits: np.ndarray, cfg: LossConfig) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if cfg.log_priors is not None:
        if len(cfg.log_priors) != logits.shape[1]:
            raise ValueError("log_priors length does not match the number of units")
        logits = logits - cfg.log_priors
    return cfg.kappa * logits


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def lfbmmi_loss(num, den, logits: np.ndarray, cfg: LossConfig) -> LossResult:
    """Numerator log-total minus boosted denominator log-total.

    The numerator pass runs first; its occupancies ``g`` become the per-frame
    accuracy proxy, and the denominator pass adds ``-b * g[t, u]`` to every
    frame-``t`` arc emitting ``u``. The gradient treats ``g`` as a constant.
    """
    if cfg.mode != "MMI":
        raise ValueError("lfbmmi_loss needs mode MMI")
    scores = adjust_scores(logits, cfg)
    try:
        logz_num, num_post = forward_backward(num, scores)
    except NoPathError as e:
        raise NoPathError(f"numerator: {e}") from None
    bonus = -cfg.boost * num_post if cfg.boost > 0 else None
    logz_den, den_post = forward_backward(den, scores, bonus)
    objective = logz_num - logz_den
    if not np.isfinite(objective):
        raise FloatingPointError("non-finite objective")
    return LossResult(float(objective), cfg.kappa * (num_post - den_post), num_post)


def ml_loss(num, logits: np.ndarray, cfg: Optional[LossConfig] = None) -> LossResult:
    """Numerator log-likelihood under per-frame log-softmax outputs.

    For a CTC numerator this is exactly the CTC log-likelihood.
    """
    if cfg is not None and cfg.mode != "ML":
        raise ValueError("ml_loss needs mode ML")
    logits = np.asarray(logits, dtype=np.float64)
    _check_scores(logits)
    logp = log_softmax(logits)
    logz, post = forward_backward(num, logp)
    p = np.exp(logp)
    grad = post - p * post.sum(axis=1, keepdims=True)
    return LossResult(float(logz), grad, post)


def ce_loss(alignment: Sequence[int], logits: np.ndarray) -> LossResult:
    """Mean per-frame negative log-softmax of the aligned unit (to be minimized)."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_scores(logits)
    T, U = logits.shape
    a = np.asarray(alignment, dtype=np.int64)
    if len(a) != T:
        raise ValueError(f"alignment has {len(a)} frames, logits have {T}")
    if np.any(a < 0) or np.any(a >= U):
        raise ValueError("alignment unit id out of range")
    logp = log_softmax(logits)
    objective = -float(logp[np.arange(T), a].mean())
    onehot = np.zeros((T, U))
    onehot[np.arange(T), a] = 1.0
    grad = (np.exp(logp) - onehot) / T
    return LossResult(objective, grad, onehot)


def estimate_priors(logit_mats: Sequence[np.ndarray], floor: float = 1e-8) -> np.ndarray:
    """Log of the average per-frame softmax posterior, floored and renormalized."""
    mats = [np.asarray(m, dtype=np.float64) for m in logit_mats]
    if not mats:
        raise ValueError("empty prior-estimation subset")
    total = sum(np.exp(log_softmax(m)).sum(axis=0) for m in mats)
    frames = sum(len(m) for m in mats)
    p = np.maximum(total / frames, floor)
    p = p / p.sum()
    return np.log(p)


def compute_loss(cfg: LossConfig, logits: np.ndarray, num=None, den=None, alignment=None) -> LossResult:
    """Dispatch on ``cfg.mode``."""
    if cfg.mode == "MMI":
        return lfbmmi_loss(num, den, logits, cfg)
    if cfg.mode == "ML":
        return ml_loss(num, logits, cfg)
    return ce_loss(alignment, logits)
