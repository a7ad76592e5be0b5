"""Label topologies (CTC, 1-state HMM, chain HMM) and per-utterance numerator FSTs.

A topology transducer reads frame-level output units on its input tape and
writes labels (base modeling units) on its output tape.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from . import wfst
from .units import UnitInventory, label_unit, unit_label
from .wfst import EPSILON, Fst

KINDS = ("ctc", "hmm1", "chain")


@dataclass(frozen=True)
class TopologySpec:
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown topology {self.kind!r}; expected one of {KINDS}")

    def validate(self, inv: UnitInventory) -> None:
        if self.kind == "ctc" and inv.blank is None:
            raise ValueError("CTC topology requires a blank unit in the inventory")
        if self.kind != "ctc" and inv.blank is not None:
            raise ValueError("blank unit present but topology is not CTC")
        if self.kind == "chain" and not inv.has_second_versions:
            raise ValueError("chain topology requires second-version units")


def topology_fst(spec: TopologySpec, inv: UnitInventory) -> Fst:
    """Fully connected topology transducer: one state per label plus a start state.

    Entering a label state writes the label; staying in it (self-loop, or the
    second-version loop for chain) writes epsilon. For CTC the start state is
    also the blank state and label states can return to it on blank.
    """
    spec.validate(inv)
    labels = inv.base_units()
    f = Fst("units", "labels")
    start = f.add_state()
    f.set_start(start)
    f.set_final(start)
    state = {}
    for l in labels:
        state[l] = f.add_state()
        f.set_final(state[l])
    blank = inv.blank
    if spec.kind == "ctc":
        f.add_arc(start, start, unit_label(blank), EPSILON)
    for l in labels:
        f.add_arc(start, state[l], unit_label(l), unit_label(l))
    for l in labels:
        s = state[l]
        loop = inv.second_version(l) if spec.kind == "chain" else l
        f.add_arc(s, s, unit_label(loop), EPSILON)
        if spec.kind == "ctc":
            f.add_arc(s, start, unit_label(blank), EPSILON)
        for m in labels:
            if spec.kind == "ctc" and m == l:
                continue
            f.add_arc(s, state[m], unit_label(m), unit_label(m))
    return f


def label_acceptor(
    labels: Sequence[int],
    silence: Optional[int] = None,
    boundaries: Iterable[int] = (),
    sil_prob: Optional[float] = None,
) -> Fst:
    """Linear transducer from label sequence to position markers.

    Label ``i`` (0-based) writes marker ``i + 1``. If ``silence`` is given, one
    optional silence label may appear at each position in ``boundaries``
    (0..L); the silence at boundary ``j`` writes marker ``L + 1 + j``. With
    ``sil_prob`` the choice at each boundary is weighted ``log p`` (silence)
    against ``log(1 - p)`` (none); otherwise both cost nothing.
    """
    L = len(labels)
    f = Fst("labels", "positions")
    main = f.add_states(L + 1)
    f.set_start(main[0])
    bset = sorted(set(boundaries)) if silence is not None else []
    if sil_prob is not None and not 0.0 < sil_prob < 1.0:
        raise ValueError("sil_prob must be in (0, 1)")
    w_sil = math.log(sil_prob) if sil_prob is not None else 0.0
    w_none = math.log1p(-sil_prob) if sil_prob is not None else 0.0
    f.set_final(main[L], w_none if L in bset else 0.0)
    for i, l in enumerate(labels):
        f.add_arc(main[i], main[i + 1], unit_label(l), i + 1, w_none if i in bset else 0.0)
    for j in bset:
        if not 0 <= j <= L:
            raise ValueError(f"boundary {j} outside 0..{L}")
        x = f.add_state()
        f.add_arc(main[j], x, unit_label(silence), L + 1 + j, w_sil)
        if j < L:
            f.add_arc(x, main[j + 1], unit_label(labels[j]), j + 1)
        else:
            f.set_final(x)
    return f


def numerator_transducer(
    labels: Sequence[int],
    spec: TopologySpec,
    inv: UnitInventory,
    allow_silence: bool = False,
    boundaries: Optional[Iterable[int]] = None,
    sil_prob: Optional[float] = None,
) -> Fst:
    """Numerator with position markers on the output tape (used for alignment)."""
    if not labels:
        raise ValueError("empty label sequence")
    spec.validate(inv)
    silence = None
    if allow_silence:
        if inv.silence is None:
            raise ValueError("silence requested but inventory has no silence unit")
        silence = inv.silence
        boundaries = range(len(labels) + 1) if boundaries is None else boundaries
    acc = label_acceptor(labels, silence, boundaries or (), sil_prob)
    return wfst.trim(wfst.compose(topology_fst(spec, inv), acc))


def numerator_fst(
    labels: Sequence[int],
    spec: TopologySpec,
    inv: UnitInventory,
    allow_silence: bool = False,
    boundaries: Optional[Iterable[int]] = None,
    sil_prob: Optional[float] = None,
) -> Fst:
    """Acceptor over output units whose strings map to ``labels`` under ``spec``.

    With ``allow_silence``, a single optional silence label may sit at each
    position in ``boundaries`` (default: every gap, including both ends).
    """
    num = wfst.project(numerator_transducer(labels, spec, inv, allow_silence, boundaries, sil_prob), "input")
    num.otype = "units"
    return num


def collapse(frames: Sequence[int], spec: TopologySpec, inv: UnitInventory, drop_silence: bool = True) -> list[int]:
    """Map a frame-level unit sequence back to labels.

    CTC: de-duplicate, then remove blanks. 1-state HMM: de-duplicate. Chain:
    every base-unit frame opens a label and second versions continue it.
    """
    if spec.kind == "ctc":
        out, prev = [], None
        for u in frames:
            if u != prev and u != inv.blank:
                out.append(u)
            prev = u
    elif spec.kind == "hmm1":
        out = [u for i, u in enumerate(frames) if i == 0 or frames[i - 1] != u]
    else:
        out = [u for u in frames if inv.base_of(u) == u]
    if drop_silence and inv.silence is not None:
        out = [u for u in out if u != inv.silence]
    return out


# ---------------------------------------------------------------------------
# time constraints


@dataclass
class TimeConstraint:
    """(unit, start, end) segments at output frame rate; ``end`` is exclusive."""

    segments: list[tuple[int, int, int]]
    tolerance: float = 5

    def __post_init__(self):
        prev_end = None
        for unit, start, end in self.segments:
            if end <= start:
                raise ValueError(f"segment ({unit}, {start}, {end}) has end <= start")
            if prev_end is not None and start != prev_end:
                raise ValueError("segments must be contiguous, ordered and non-overlapping")
            prev_end = end

    @property
    def num_frames(self) -> int:
        return self.segments[-1][2] if self.segments else 0


def apply_time_constraints(num: Fst, tc: TimeConstraint, inv: Optional[UnitInventory] = None) -> Fst:
    """Unroll ``num`` over the utterance's frames, keeping a frame-``t`` arc for unit
    ``u`` only if some segment of ``u`` covers ``t`` within the tolerance.

    Second-version units are matched against their base unit's segments.
    """
    T = tc.num_frames
    tol = tc.tolerance
    allowed: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for u, s, e in tc.segments:
        allowed[u].append((s, e))

    def ok(u: int, t: int) -> bool:
        base = inv.base_of(u) if inv is not None else u
        return any(s - tol <= t < e + tol for s, e in allowed.get(base, ()))

    out = Fst(num.itype, num.otype)
    if num.is_empty():
        raise ValueError("time constraints applied to an empty numerator")
    ids: dict[tuple[int, int], int] = {}
    frontier = [num.start]
    ids[(0, num.start)] = out.add_state()
    out.set_start(ids[(0, num.start)])
    for t in range(T):
        nxt: list[int] = []
        for q in frontier:
            src = ids[(t, q)]
            for a in num.arcs(q):
                if a.ilabel == EPSILON:
                    raise ValueError("time constraints need an epsilon-free numerator")
                if not ok(label_unit(a.ilabel), t):
                    continue
                key = (t + 1, a.nextstate)
                if key not in ids:
                    ids[key] = out.add_state()
                    nxt.append(a.nextstate)
                out.add_arc(src, ids[key], a.ilabel, a.olabel, a.weight)
        if not nxt:
            raise ValueError(f"time constraints leave no path: frame {t} has no admissible arc")
        frontier = nxt
    for q in frontier:
        if q in num.finals:
            out.set_final(ids[(T, q)], num.finals[q])
    trimmed = wfst.trim(out)
    if trimmed.is_empty():
        raise ValueError(f"time constraints leave no path: no final state reachable at frame {T}")
    return trimmed


def segments_from_frames(frames: Sequence[int]) -> list[tuple[int, int, int]]:
    segs: list[tuple[int, int, int]] = []
    for t, u in enumerate(frames):
        if segs and segs[-1][0] == u:
            segs[-1] = (u, segs[-1][1], t + 1)
        else:
            segs.append((u, t, t + 1))
    return segs


def write_time_constraints(items: dict[str, Sequence[tuple[int, int, int]]]) -> str:
    return "".join(f"{utt} {u} {s} {e}\n" for utt in sorted(items) for u, s, e in items[utt])


def read_time_constraints(text: str) -> dict[str, list[tuple[int, int, int]]]:
    out: dict[str, list[tuple[int, int, int]]] = defaultdict(list)
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        utt, u, s, e = line.split()
        out[utt].append((int(u), int(s), int(e)))
    return dict(out)


INF_TOLERANCE = math.inf
