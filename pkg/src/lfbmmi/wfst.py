"""Weighted finite-state transducers over integer labels.

Weights are natural-log scores: higher is better, path weight is the sum of
arc weights plus the final weight, and ``-inf`` is the semiring zero. Label 0
is epsilon on both tapes. Costs (negated scores) only appear in the text
serialization.
"""

from __future__ import annotations

import math
from collections import deque
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

EPSILON = 0
NEG_INF = float("-inf")


class NoPathError(ValueError):
    """Raised when an operation needs a successful path and there is none."""


class Arc(NamedTuple):
    ilabel: int
    olabel: int
    weight: float
    nextstate: int


def log_add(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def log_sum(values: Iterable[float]) -> float:
    vals = [v for v in values if v != NEG_INF]
    if not vals:
        return NEG_INF
    m = max(vals)
    return m + math.log(sum(math.exp(v - m) for v in vals))


class Fst:
    """Mutable-while-building transducer; algorithms never modify their inputs.

    ``itype``/``otype`` optionally name the alphabet of each tape (e.g.
    ``"units"``, ``"labels"``, ``"words"``) so composition can refuse
    mismatched id spaces.
    """

    def __init__(self, itype: Optional[str] = None, otype: Optional[str] = None):
        self._arcs: list[list[Arc]] = []
        self.finals: dict[int, float] = {}
        self.start: Optional[int] = None
        self.itype = itype
        self.otype = otype

    # construction -------------------------------------------------------
    def add_state(self) -> int:
        self._arcs.append([])
        return len(self._arcs) - 1

    def add_states(self, n: int) -> list[int]:
        return [self.add_state() for _ in range(n)]

    def set_start(self, s: int) -> None:
        self._check(s)
        self.start = s

    def set_final(self, s: int, weight: float = 0.0) -> None:
        self._check(s)
        if weight == NEG_INF:
            self.finals.pop(s, None)
        else:
            self.finals[s] = float(weight)

    def add_arc(self, src: int, dst: int, ilabel: int, olabel: int, weight: float = 0.0) -> None:
        self._check(src)
        self._check(dst)
        self._arcs[src].append(Arc(int(ilabel), int(olabel), float(weight), dst))

    def _check(self, s: int) -> None:
        if not 0 <= s < len(self._arcs):
            raise IndexError(f"state {s} out of range (num_states={len(self._arcs)})")

    # inspection ---------------------------------------------------------
    @property
    def num_states(self) -> int:
        return len(self._arcs)

    @property
    def num_arcs(self) -> int:
        return sum(len(a) for a in self._arcs)

    def states(self) -> range:
        return range(len(self._arcs))

    def arcs(self, s: int) -> list[Arc]:
        return self._arcs[s]

    def final(self, s: int) -> float:
        return self.finals.get(s, NEG_INF)

    def is_final(self, s: int) -> bool:
        return s in self.finals

    def is_empty(self) -> bool:
        return self.start is None or self.num_states == 0

    def is_acceptor(self) -> bool:
        return all(a.ilabel == a.olabel for arcs in self._arcs for a in arcs)

    def all_arcs(self) -> Iterable[tuple[int, Arc]]:
        for s, arcs in enumerate(self._arcs):
            for a in arcs:
                yield s, a

    def copy(self) -> "Fst":
        out = Fst(self.itype, self.otype)
        out._arcs = [list(a) for a in self._arcs]
        out.finals = dict(self.finals)
        out.start = self.start
        return out

    def __repr__(self) -> str:
        return f"Fst(states={self.num_states}, arcs={self.num_arcs}, start={self.start})"

    def to_arrays(self) -> dict[str, np.ndarray]:
        """Flat arc arrays (src, dst, ilabel, olabel, weight) plus a final-weight vector."""
        src, dst, il, ol, w = [], [], [], [], []
        for s, a in self.all_arcs():
            src.append(s)
            dst.append(a.nextstate)
            il.append(a.ilabel)
            ol.append(a.olabel)
            w.append(a.weight)
        finals = np.full(self.num_states, NEG_INF)
        for s, fw in self.finals.items():
            finals[s] = fw
        return {
            "src": np.asarray(src, dtype=np.int64),
            "dst": np.asarray(dst, dtype=np.int64),
            "ilabel": np.asarray(il, dtype=np.int64),
            "olabel": np.asarray(ol, dtype=np.int64),
            "weight": np.asarray(w, dtype=np.float64),
            "finals": finals,
        }


def linear_fst(
    ilabels: Sequence[int],
    olabels: Optional[Sequence[int]] = None,
    weights: Optional[Sequence[float]] = None,
    itype: Optional[str] = None,
    otype: Optional[str] = None,
) -> Fst:
    olabels = ilabels if olabels is None else olabels
    if len(olabels) != len(ilabels):
        raise ValueError("ilabels and olabels differ in length")
    weights = [0.0] * len(ilabels) if weights is None else weights
    f = Fst(itype, otype if olabels is not ilabels else (otype or itype))
    states = f.add_states(len(ilabels) + 1)
    f.set_start(states[0])
    for i, (x, y, w) in enumerate(zip(ilabels, olabels, weights)):
        f.add_arc(states[i], states[i + 1], x, y, w)
    f.set_final(states[-1], 0.0)
    return f


# ---------------------------------------------------------------------------
# structural algorithms


def _accessible(f: Fst) -> set[int]:
    if f.start is None:
        return set()
    seen = {f.start}
    stack = [f.start]
    while stack:
        s = stack.pop()
        for a in f.arcs(s):
            if a.nextstate not in seen:
                seen.add(a.nextstate)
                stack.append(a.nextstate)
    return seen


def _coaccessible(f: Fst) -> set[int]:
    rev: list[list[int]] = [[] for _ in f.states()]
    for s, a in f.all_arcs():
        rev[a.nextstate].append(s)
    seen = set(f.finals)
    stack = list(seen)
    while stack:
        s = stack.pop()
        for p in rev[s]:
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def _restrict(f: Fst, keep: set[int]) -> Fst:
    out = Fst(f.itype, f.otype)
    if f.start is None or f.start not in keep:
        return out
    order = sorted(keep)
    remap = {s: i for i, s in enumerate(order)}
    out.add_states(len(order))
    out.set_start(remap[f.start])
    for s in order:
        for a in f.arcs(s):
            if a.nextstate in keep and a.weight != NEG_INF:
                out.add_arc(remap[s], remap[a.nextstate], a.ilabel, a.olabel, a.weight)
        if s in f.finals:
            out.set_final(remap[s], f.finals[s])
    return out


def trim(f: Fst) -> Fst:
    """Keep only states lying on some start-to-final path (order preserved)."""
    return _restrict(f, _accessible(f) & _coaccessible(f))


def project(f: Fst, side: str = "input") -> Fst:
    if side not in ("input", "output"):
        raise ValueError(f"side must be 'input' or 'output', got {side!r}")
    out = f.copy()
    for s in out.states():
        out._arcs[s] = [
            Arc(a.ilabel, a.ilabel, a.weight, a.nextstate)
            if side == "input"
            else Arc(a.olabel, a.olabel, a.weight, a.nextstate)
            for a in out._arcs[s]
        ]
    out.itype = out.otype = f.itype if side == "input" else f.otype
    return out


def invert(f: Fst) -> Fst:
    out = f.copy()
    for s in out.states():
        out._arcs[s] = [Arc(a.olabel, a.ilabel, a.weight, a.nextstate) for a in out._arcs[s]]
    out.itype, out.otype = f.otype, f.itype
    return out


def relabel(f: Fst, imap=None, omap=None) -> Fst:
    """Apply label maps (callables or dicts); epsilon is never remapped."""

    def _get(m, x):
        if m is None or x == EPSILON:
            return x
        return m(x) if callable(m) else m[x]

    out = f.copy()
    for s in out.states():
        out._arcs[s] = [
            Arc(_get(imap, a.ilabel), _get(omap, a.olabel), a.weight, a.nextstate) for a in out._arcs[s]
        ]
    return out


def compose(a: Fst, b: Fst) -> Fst:
    """Composition with the three-state epsilon-matching filter.

    Filter state 0: any move allowed. 1: only ``a`` has moved alone on an
    output epsilon. 2: only ``b`` has moved alone on an input epsilon. The
    filter forbids the interleavings that would count an epsilon path twice.
    """
    if a.otype is not None and b.itype is not None and a.otype != b.itype:
        raise ValueError(f"alphabet mismatch: {a.otype!r} output vs {b.itype!r} input")
    out = Fst(a.itype, b.otype)
    if a.is_empty() or b.is_empty():
        return out

    b_index: list[dict[int, list[Arc]]] = []
    for s in b.states():
        idx: dict[int, list[Arc]] = {}
        for arc in b.arcs(s):
            idx.setdefault(arc.ilabel, []).append(arc)
        b_index.append(idx)

    ids: dict[tuple[int, int, int], int] = {}
    queue: deque[tuple[int, int, int]] = deque()

    def state_id(t: tuple[int, int, int]) -> int:
        sid = ids.get(t)
        if sid is None:
            sid = out.add_state()
            ids[t] = sid
            queue.append(t)
        return sid

    out.set_start(state_id((a.start, b.start, 0)))
    while queue:
        t = queue.popleft()
        qa, qb, filt = t
        src = ids[t]
        b_eps = b_index[qb].get(EPSILON, [])
        for ea in a.arcs(qa):
            if ea.olabel != EPSILON:
                for eb in b_index[qb].get(ea.olabel, []):
                    dst = state_id((ea.nextstate, eb.nextstate, 0))
                    out.add_arc(src, dst, ea.ilabel, eb.olabel, ea.weight + eb.weight)
            else:
                if filt == 0:
                    for eb in b_eps:
                        dst = state_id((ea.nextstate, eb.nextstate, 0))
                        out.add_arc(src, dst, ea.ilabel, eb.olabel, ea.weight + eb.weight)
                if filt in (0, 1):
                    dst = state_id((ea.nextstate, qb, 1))
                    out.add_arc(src, dst, ea.ilabel, EPSILON, ea.weight)
        if filt in (0, 2):
            for eb in b_eps:
                dst = state_id((qa, eb.nextstate, 2))
                out.add_arc(src, dst, EPSILON, eb.olabel, eb.weight)
        if qa in a.finals and qb in b.finals:
            out.set_final(src, a.finals[qa] + b.finals[qb])
    return out


def topological_order(f: Fst, label_filter=None) -> Optional[list[int]]:
    """Topological order of states (restricted to arcs passing ``label_filter``), or None if cyclic."""
    indeg = [0] * f.num_states
    for s, a in f.all_arcs():
        if label_filter is None or label_filter(a):
            indeg[a.nextstate] += 1
    ready = deque(s for s in f.states() if indeg[s] == 0)
    order = []
    while ready:
        s = ready.popleft()
        order.append(s)
        for a in f.arcs(s):
            if label_filter is None or label_filter(a):
                indeg[a.nextstate] -= 1
                if indeg[a.nextstate] == 0:
                    ready.append(a.nextstate)
    return order if len(order) == f.num_states else None


def total_weight(f: Fst) -> float:
    """Log-semiring sum over all successful paths; requires an acyclic FST."""
    if f.is_empty():
        return NEG_INF
    order = topological_order(f)
    if order is None:
        raise ValueError("total_weight requires an acyclic FST")
    alpha = [NEG_INF] * f.num_states
    alpha[f.start] = 0.0
    total = NEG_INF
    for s in order:
        if alpha[s] == NEG_INF:
            continue
        for a in f.arcs(s):
            alpha[a.nextstate] = log_add(alpha[a.nextstate], alpha[s] + a.weight)
        if s in f.finals:
            total = log_add(total, alpha[s] + f.finals[s])
    return total


def _eps_closure(f: Fst, is_eps) -> list[dict[int, float]]:
    """Per-state log-weighted closure over epsilon arcs (including the state itself)."""
    n = f.num_states
    order = topological_order(f, is_eps)
    closures: list[dict[int, float]] = [dict() for _ in range(n)]
    if order is not None:
        for s in reversed(order):
            c = {s: 0.0}
            for a in f.arcs(s):
                if is_eps(a):
                    for d, w in closures[a.nextstate].items():
                        c[d] = log_add(c.get(d, NEG_INF), a.weight + w)
            closures[s] = c
        return closures
    # cyclic epsilon subgraph: solve (I - E)^-1 in the probability domain
    eps_states = sorted({s for s, a in f.all_arcs() if is_eps(a)} | {a.nextstate for s, a in f.all_arcs() if is_eps(a)})
    pos = {s: i for i, s in enumerate(eps_states)}
    m = np.zeros((len(eps_states), len(eps_states)))
    for s, a in f.all_arcs():
        if is_eps(a):
            m[pos[s], pos[a.nextstate]] += math.exp(a.weight)
    inv = np.linalg.inv(np.eye(len(eps_states)) - m)
    for s in f.states():
        if s not in pos:
            closures[s] = {s: 0.0}
            continue
        row = inv[pos[s]]
        closures[s] = {eps_states[j]: math.log(v) for j, v in enumerate(row) if v > 0}
    return closures


def remove_epsilon(f: Fst) -> Fst:
    """Remove arcs whose labels are epsilon on both tapes (log semiring)."""

    def is_eps(a: Arc) -> bool:
        return a.ilabel == EPSILON and a.olabel == EPSILON

    if not any(is_eps(a) for _, a in f.all_arcs()):
        return f.copy()
    closures = _eps_closure(f, is_eps)
    out = Fst(f.itype, f.otype)
    out.add_states(f.num_states)
    if f.start is not None:
        out.set_start(f.start)
    for s in f.states():
        merged: dict[tuple[int, int, int], float] = {}
        order: list[tuple[int, int, int]] = []
        fw = NEG_INF
        for d, w in sorted(closures[s].items()):
            for a in f.arcs(d):
                if is_eps(a):
                    continue
                key = (a.ilabel, a.olabel, a.nextstate)
                if key not in merged:
                    order.append(key)
                    merged[key] = NEG_INF
                merged[key] = log_add(merged[key], w + a.weight)
            if d in f.finals:
                fw = log_add(fw, w + f.finals[d])
        for key in order:
            out.add_arc(s, key[2], key[0], key[1], merged[key])
        if fw != NEG_INF:
            out.set_final(s, fw)
    return trim(out)


def shortest_path(f: Fst) -> tuple[list[int], float]:
    """Best (max-score) successful path in the tropical semiring.

    Returns the path's non-epsilon output labels and its weight. Ties go to the
    lexicographically smallest state sequence.
    """
    labels, weight, _ = shortest_path_arcs(f)
    return [a.olabel for a in labels if a.olabel != EPSILON], weight


def shortest_path_arcs(f: Fst) -> tuple[list[Arc], float, list[int]]:
    """Like :func:`shortest_path` but returns the arcs and the state sequence."""
    if f.is_empty() or not f.finals:
        raise NoPathError("shortest_path on an empty FST")
    order = topological_order(f)
    best: dict[int, tuple[float, tuple[int, ...], tuple[Arc, ...]]] = {}

    def better(cand, cur) -> bool:
        return cur is None or cand[0] > cur[0] or (cand[0] == cur[0] and cand[1] < cur[1])

    if order is not None:
        best[f.start] = (0.0, (f.start,), ())
        for s in order:
            if s not in best:
                continue
            score, path, arcs = best[s]
            for a in f.arcs(s):
                cand = (score + a.weight, path + (a.nextstate,), arcs + (a,))
                if better(cand, best.get(a.nextstate)):
                    best[a.nextstate] = cand
    else:
        if any(a.weight > 0 for _, a in f.all_arcs()):
            raise ValueError("shortest_path on a cyclic FST requires non-positive weights")
        import heapq

        heap = [(0.0, (f.start,), f.start, ())]
        done: set[int] = set()
        while heap:
            cost, path, s, arcs = heapq.heappop(heap)
            if s in done:
                continue
            done.add(s)
            best[s] = (-cost, path, arcs)
            for a in f.arcs(s):
                if a.nextstate not in done:
                    heapq.heappush(heap, (cost - a.weight, path + (a.nextstate,), a.nextstate, arcs + (a,)))

    winner = None
    for s, fw in f.finals.items():
        if s in best:
            score, path, arcs = best[s]
            cand = (score + fw, path, arcs)
            if better(cand, winner):
                winner = cand
    if winner is None:
        raise NoPathError("no successful path")
    return list(winner[2]), winner[0], list(winner[1])


def accepts(f: Fst, ilabels: Sequence[int]) -> float:
    """Log-sum weight of all paths reading ``ilabels`` on the input tape (epsilon-free input assumed)."""
    if f.is_empty():
        return NEG_INF
    cur = {f.start: 0.0}
    for x in ilabels:
        nxt: dict[int, float] = {}
        for s, w in cur.items():
            for a in f.arcs(s):
                if a.ilabel == x:
                    nxt[a.nextstate] = log_add(nxt.get(a.nextstate, NEG_INF), w + a.weight)
        cur = nxt
        if not cur:
            return NEG_INF
    return log_sum(w + f.finals[s] for s, w in cur.items() if s in f.finals)


def enumerate_paths(f: Fst, length: int) -> list[tuple[list[Arc], float]]:
    """All successful paths with exactly ``length`` arcs (brute force, for oracles)."""
    out: list[tuple[list[Arc], float]] = []
    if f.is_empty():
        return out

    def rec(s: int, arcs: list[Arc], w: float) -> None:
        if len(arcs) == length:
            if s in f.finals:
                out.append((list(arcs), w + f.finals[s]))
            return
        for a in f.arcs(s):
            arcs.append(a)
            rec(a.nextstate, arcs, w + a.weight)
            arcs.pop()

    rec(f.start, [], 0.0)
    return out


# ---------------------------------------------------------------------------
# text format


def _cost(w: float) -> str:
    if w == NEG_INF:
        return "inf"
    return repr(-w + 0.0)


def _parse_cost(s: str) -> float:
    if s == "inf":
        return NEG_INF
    return -float(s) + 0.0


def write_text(f: Fst, header: Optional[dict[str, str]] = None) -> str:
    """Serialize to the tab-separated text format (costs = negated scores, shortest exact repr).

    The start state's lines come first so the first arc's source is the start.
    """
    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    if f.is_empty() or (not f.arcs(f.start) and f.start not in f.finals):
        return "".join(line + "\n" for line in lines)
    order = [f.start] + [s for s in f.states() if s != f.start]
    finals_first = not f.arcs(f.start)
    if finals_first:
        lines.append(f"{f.start}\t{_cost(f.finals[f.start])}")
    for s in order:
        for a in f.arcs(s):
            lines.append(f"{s}\t{a.nextstate}\t{a.ilabel}\t{a.olabel}\t{_cost(a.weight)}")
    for s in order:
        if s in f.finals and not (finals_first and s == f.start):
            lines.append(f"{s}\t{_cost(f.finals[s])}")
    return "".join(line + "\n" for line in lines)


def read_text(text: str) -> tuple[Fst, dict[str, str]]:
    """Parse the text format; returns the FST and any ``# key=value`` header entries."""
    header: dict[str, str] = {}
    rows: list[list[str]] = []
    for raw in text.splitlines():
        if not raw.strip():
            continue
        if raw.startswith("#"):
            body = raw[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                header[k.strip()] = v.strip()
            continue
        rows.append(raw.split("\t"))
    f = Fst()
    if not rows:
        return f, header
    max_state = 0
    for r in rows:
        if len(r) == 5:
            max_state = max(max_state, int(r[0]), int(r[1]))
        elif len(r) in (1, 2):
            max_state = max(max_state, int(r[0]))
        else:
            raise ValueError(f"malformed FST line: {r!r}")
    f.add_states(max_state + 1)
    f.set_start(int(rows[0][0]))
    for r in rows:
        if len(r) == 5:
            f.add_arc(int(r[0]), int(r[1]), int(r[2]), int(r[3]), _parse_cost(r[4]))
        else:
            f.set_final(int(r[0]), _parse_cost(r[1]) if len(r) == 2 else 0.0)
    return f, header
