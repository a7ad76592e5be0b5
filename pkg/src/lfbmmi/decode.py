"""Word-level decoding graphs, Viterbi decoding, forced alignment, WER and time-stamp error."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import lm as lmmod
from . import topology as topo
from . import wfst
from .graphs import content_hash, inventory_hash
from .loss import CompiledGraph, LossConfig, adjust_scores, viterbi
from .lm import NgramLm
from .topology import TopologySpec
from .units import Lexicon, UnitInventory, build_lexicon_fst
from .wfst import EPSILON, Fst, NoPathError


@dataclass
class DecodeGraph:
    """Transducer from output-unit labels to word labels (``lex.word_label``)."""

    fst: Fst
    words: list[str]
    metadata: dict[str, str] = field(default_factory=dict)
    _compiled: Optional[CompiledGraph] = field(default=None, repr=False, compare=False)

    @property
    def compiled(self) -> CompiledGraph:
        if self._compiled is None:
            self._compiled = CompiledGraph(self.fst)
        return self._compiled

    def check_inventory(self, inv: UnitInventory) -> None:
        want = self.metadata.get("inventory_hash")
        if want is not None and want != inventory_hash(inv):
            raise ValueError(
                f"decode graph was built for inventory {want}, model uses {inventory_hash(inv)}"
            )

    def to_text(self) -> str:
        header = {"graph": "decode", "words": " ".join(self.words), **self.metadata}
        return wfst.write_text(self.fst, header)

    @classmethod
    def from_text(cls, text: str) -> "DecodeGraph":
        f, header = wfst.read_text(text)
        header.pop("graph", None)
        words = header.pop("words", "").split()
        return cls(f, words, header)


def build_decode_graph(word_lm: NgramLm, lex: Lexicon, inv: UnitInventory, topology: str) -> DecodeGraph:
    """topology o lexicon o word LM, with silence allowed between words when the
    inventory has a silence unit. Context dependency lives in the lexicon's
    pronunciations (bi-char and chenone units are word-internal)."""
    missing = [w for w in word_lm.vocab if w not in lex.entries]
    if missing:
        raise ValueError(f"lexicon is missing LM words: {' '.join(missing)}")
    spec = TopologySpec(topology)
    labels = lex.word_labels()
    g = lmmod.lm_to_fst(word_lm, {w: labels[w] for w in word_lm.vocab}, "words")
    L = build_lexicon_fst(lex, inv.silence is not None, inv.silence)
    L.itype = "labels"
    lg = wfst.compose(L, g)
    hlg = wfst.remove_epsilon(wfst.trim(wfst.compose(topo.topology_fst(spec, inv), lg)))
    if hlg.is_empty():
        raise ValueError("decode graph is empty")
    meta = {
        "topology": topology,
        "unit_type": inv.unit_type,
        "inventory_hash": inventory_hash(inv),
        "lm_hash": word_lm.content_hash(),
        "lexicon_hash": content_hash(lex.to_tsv()),
    }
    return DecodeGraph(hlg, lex.words, meta)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class Hypothesis:
    words: list[str]
    word_times: list[tuple[int, int]]  # output frames, end exclusive
    score: float

    def format(self, utt_id: str) -> str:
        items = " ".join(f"{w}[{s},{e}]" for w, (s, e) in zip(self.words, self.word_times))
        return f"{utt_id}\t{items}\t{self.score!r}"

    @staticmethod
    def parse(line: str) -> tuple[str, "Hypothesis"]:
        utt, items, score = line.rstrip("\n").split("\t")
        words, times = [], []
        for item in items.split():
            w, _, rest = item.partition("[")
            s, e = rest.rstrip("]").split(",")
            words.append(w)
            times.append((int(s), int(e)))
        return utt, Hypothesis(words, times, float(score))


def write_hypotheses(hyps: Mapping[str, Hypothesis]) -> str:
    return "".join(hyps[u].format(u) + "\n" for u in sorted(hyps))


def read_hypotheses(text: str) -> dict[str, Hypothesis]:
    out = {}
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            utt, h = Hypothesis.parse(line)
            out[utt] = h
    return out


def _word_spans(starts: list[int], speech: np.ndarray, T: int) -> list[tuple[int, int]]:
    """A word starts at the frame carrying its label and ends after the last
    speech frame before the next word starts."""
    spans = []
    for k, s in enumerate(starts):
        limit = starts[k + 1] if k + 1 < len(starts) else T
        idx = np.flatnonzero(speech[s:limit])
        spans.append((s, s + int(idx[-1]) + 1 if len(idx) else s + 1))
    return spans


def viterbi_decode(
    logits: np.ndarray,
    graph: DecodeGraph,
    cfg: LossConfig,
    inv: UnitInventory,
    beam: float = np.inf,
) -> Hypothesis:
    graph.check_inventory(inv)
    scores = adjust_scores(logits, cfg)
    g = graph.compiled
    try:
        score, arcs = viterbi(g, scores, beam)
    except NoPathError as e:
        raise NoPathError(f"no hypothesis: {e}") from None
    units = g.unit[arcs]
    olabels = g.olabel[arcs]
    starts = [int(t) for t in np.flatnonzero(olabels)]
    words = [graph.words[int(olabels[t]) - 1] for t in starts]
    nonspeech = {u for u in (inv.silence, inv.blank) if u is not None}
    speech = ~np.isin(units, list(nonspeech))
    return Hypothesis(words, _word_spans(starts, speech, len(units)), score)


# ---------------------------------------------------------------------------
# forced alignment


@dataclass
class Alignment:
    frames: list[int]  # unit id per output frame
    segments: list[tuple[int, int, int]]  # (base unit, start, end), tiling [0, T)
    positions: list[Optional[int]]  # label position per segment; None for silence and blank


def force_align(logits: np.ndarray, num, cfg: LossConfig, inv: UnitInventory, num_labels: Optional[int] = None) -> Alignment:
    """Best path through a numerator transducer whose output tape carries label
    position markers. A new segment starts at every marker and at every switch
    between blank and non-blank frames.

    ``num_labels`` (read from a NumGraph's metadata when omitted) separates real
    label markers from the markers of optional silences.
    """
    fst = getattr(num, "fst", num)
    if num_labels is None:
        if "num_labels" not in getattr(num, "metadata", {}):
            raise ValueError("force_align needs the numerator's label count")
        num_labels = int(num.metadata["num_labels"])
    g = CompiledGraph(fst)
    scores = adjust_scores(logits, cfg)
    try:
        _, arcs = viterbi(g, scores)
    except NoPathError as e:
        raise NoPathError(f"alignment failed: {e}") from None
    units = [int(u) for u in g.unit[arcs]]
    marks = [int(m) for m in g.olabel[arcs]]
    segments: list[tuple[int, int, int]] = []
    positions: list[Optional[int]] = []
    blank = inv.blank
    for t, (u, m) in enumerate(zip(units, marks)):
        prev_blank = t > 0 and units[t - 1] == blank
        if t == 0 or m != EPSILON or (u == blank) != prev_blank:
            segments.append((inv.base_of(u), t, t + 1))
            positions.append(m - 1 if EPSILON < m <= num_labels else None)
        else:
            s = segments[-1]
            segments[-1] = (s[0], s[1], t + 1)
    return Alignment(units, segments, positions)


def alignment_word_times(ali: Alignment, boundaries: Sequence[int]) -> list[tuple[int, int]]:
    """Word spans from an alignment, given label positions of word boundaries."""
    times = []
    for k in range(len(boundaries) - 1):
        lo, hi = boundaries[k], boundaries[k + 1]
        segs = [s for s, p in zip(ali.segments, ali.positions) if p is not None and lo <= p < hi]
        if not segs:
            raise ValueError(f"word {k} has no aligned segment")
        times.append((segs[0][1], segs[-1][2]))
    return times


def label_segments(ali: Alignment, inv: UnitInventory) -> list[tuple[int, int, int]]:
    """One segment per label position (silences included); blank runs are
    merged into the preceding segment, or the following one at the start."""
    out: list[tuple[int, int, int]] = []
    pending_start = None
    for u, s, e in ali.segments:
        if u == inv.blank:
            if out:
                out[-1] = (out[-1][0], out[-1][1], e)
            elif pending_start is None:
                pending_start = s
            continue
        if pending_start is not None:
            s, pending_start = pending_start, None
        out.append((u, s, e))
    return out


# ---------------------------------------------------------------------------
# metrics


def edit_alignment(ref: Sequence[str], hyp: Sequence[str]) -> list[tuple[Optional[int], Optional[int]]]:
    """Levenshtein alignment as (ref index, hyp index) pairs; None marks
    insertions and deletions. Ties prefer match/substitution, then deletion."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    pairs = []
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            pairs.append((i - 1, None))
            i -= 1
        else:
            pairs.append((None, j - 1))
            j -= 1
    return pairs[::-1]


def word_errors(ref: Sequence[str], hyp: Sequence[str]) -> int:
    return sum(
        r is None or h is None or ref[r] != hyp[h] for r, h in edit_alignment(ref, hyp)
    )


def wer(refs: Mapping[str, Sequence[str]], hyps: Mapping[str, Sequence[str]]) -> float:
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise ValueError(f"no hypothesis for utterance(s): {' '.join(missing)}")
    total = sum(len(r) for r in refs.values())
    if total == 0:
        raise ValueError("references contain no words")
    return sum(word_errors(refs[u], hyps[u]) for u in refs) / total


def tse(
    refs: Mapping[str, tuple[Sequence[str], Sequence[tuple[int, int]]]],
    hyps: Mapping[str, Hypothesis],
    frame_ms: float = 10.0,
    stride: int = 1,
) -> Optional[float]:
    """Mean absolute start/end error in ms over correctly recognized words.

    ``refs`` maps utt_id to (words, output-frame spans). Returns None when no
    word is correct.
    """
    errs: list[int] = []
    for u, (rwords, rtimes) in refs.items():
        if u not in hyps:
            raise ValueError(f"no hypothesis for utterance {u}")
        h = hyps[u]
        for r, k in edit_alignment(rwords, h.words):
            if r is None or k is None or rwords[r] != h.words[k]:
                continue
            errs.append(abs(rtimes[r][0] - h.word_times[k][0]))
            errs.append(abs(rtimes[r][1] - h.word_times[k][1]))
    if not errs:
        return None
    return float(np.mean(errs)) * frame_ms * stride
