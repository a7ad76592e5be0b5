"""Backoff n-gram language models over unit/token strings and their FST rendering."""

from __future__ import annotations

import hashlib
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .wfst import EPSILON, NEG_INF, Fst, log_sum

BOS = "<s>"
EOS = "</s>"
LN10 = math.log(10.0)

History = tuple[str, ...]


@dataclass
class NgramLm:
    """Backoff model: explicit log-probabilities per history plus log backoff weights.

    ``probs[h][w]`` holds natural-log probabilities; ``backoffs[h]`` the log
    mass handed to the shorter history ``h[1:]``. With ``sentence_end`` False
    the model never predicts ``</s>`` and every FST state is final.
    """

    order: int
    probs: dict[History, dict[str, float]]
    backoffs: dict[History, float] = field(default_factory=dict)
    sentence_end: bool = True

    @property
    def vocab(self) -> list[str]:
        """Predictable tokens (excluding ``</s>``)."""
        return sorted(w for w in self.probs.get((), {}) if w != EOS)

    def contexts(self) -> list[History]:
        return sorted(self.probs, key=lambda h: (len(h), h))

    def _context(self, history: Sequence[str]) -> History:
        h = tuple(history)[-(self.order - 1) :] if self.order > 1 else ()
        while h and h not in self.probs:
            h = h[1:]
        return h

    def logprob(self, history: Sequence[str], token: str) -> float:
        h = self._context(history)
        acc = 0.0
        while True:
            p = self.probs.get(h, {}).get(token)
            if p is not None:
                return acc + p
            if not h:
                return NEG_INF
            acc += self.backoffs.get(h, NEG_INF)
            if acc == NEG_INF:
                return NEG_INF
            h = h[1:]

    def start_history(self) -> History:
        return (BOS,) if self.order > 1 else ()

    def score(self, tokens: Sequence[str]) -> float:
        hist = list(self.start_history())
        total = 0.0
        for w in tokens:
            total += self.logprob(hist, w)
            hist.append(w)
        if self.sentence_end:
            total += self.logprob(hist, EOS)
        return total

    def content_hash(self) -> str:
        return hashlib.sha256(write_arpa(self).encode("utf-8")).hexdigest()[:16]


def estimate_ngram(
    sequences: Sequence[Sequence[str]],
    order: int,
    smoothing: str = "witten-bell",
    vocab: Optional[Sequence[str]] = None,
    sentence_end: bool = True,
) -> NgramLm:
    """Count-based estimation; ``smoothing`` is ``"witten-bell"`` or ``"none"`` (MLE).

    Witten-Bell is written in backoff form: explicit probabilities interpolate
    with the shorter history and the backoff weight is ``N1+(h) / (c(h) + N1+(h))``.
    The unigram level interpolates with a uniform distribution over ``vocab``
    (plus every seen token), so every vocabulary token has nonzero mass.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if not sequences or not any(len(s) for s in sequences):
        raise ValueError("empty input")
    if smoothing not in ("witten-bell", "none"):
        raise ValueError(f"unknown smoothing {smoothing!r}")

    counts: dict[History, Counter] = defaultdict(Counter)
    for seq in sequences:
        hist = [BOS] if order > 1 else []
        targets = list(seq) + ([EOS] if sentence_end else [])
        for w in targets:
            for k in range(0, order):
                if k > len(hist):
                    break
                h = tuple(hist[len(hist) - k :]) if k else ()
                counts[h][w] += 1
            hist.append(w)

    full_vocab = sorted(set(vocab or []) | {w for c in counts.values() for w in c} - {EOS, BOS})
    predict = full_vocab + ([EOS] if sentence_end else [])

    probs: dict[History, dict[str, float]] = {}
    backoffs: dict[History, float] = {}
    uni = counts[()]
    n, n1 = sum(uni.values()), len(uni)
    if smoothing == "none":
        probs[()] = {w: math.log(uni[w] / n) for w in sorted(uni)}
    else:
        probs[()] = {w: math.log((uni[w] + n1 / len(predict)) / (n + n1)) for w in predict}

    for k in range(1, order):
        for h in sorted(x for x in counts if len(x) == k):
            c = counts[h]
            total, distinct = sum(c.values()), len(c)
            lower = h[1:]
            row = {}
            for w in sorted(c):
                if smoothing == "none":
                    row[w] = math.log(c[w] / total)
                else:
                    p_low = math.exp(_backoff_logprob(probs, backoffs, lower, w))
                    row[w] = math.log((c[w] + distinct * p_low) / (total + distinct))
            probs[h] = row
            backoffs[h] = NEG_INF if smoothing == "none" else math.log(distinct / (total + distinct))
    return NgramLm(order, probs, backoffs, sentence_end)


def _backoff_logprob(probs, backoffs, h: History, w: str) -> float:
    acc = 0.0
    while True:
        p = probs.get(h, {}).get(w)
        if p is not None:
            return acc + p
        if not h:
            return NEG_INF
        acc += backoffs.get(h, NEG_INF)
        h = h[1:]


def insert_silence(
    utterances: Sequence[Sequence[Sequence[str]]],
    silence: str,
    p_sil: float,
    seed: int,
    word_boundary: Optional[str] = None,
) -> list[list[str]]:
    """Flatten word-segmented utterances, inserting ``silence`` at word boundaries.

    Boundaries include the utterance start and end; each gets an independent
    Bernoulli(``p_sil``) draw from a generator seeded with ``seed``. If
    ``word_boundary`` is given it separates words, and a silence after a word
    is always preceded by it.
    """
    if not 0.0 <= p_sil < 1.0:
        raise ValueError("p_sil must be in [0, 1)")
    rng = np.random.default_rng(seed)
    out = []
    for words in utterances:
        draws = rng.random(len(words) + 1) < p_sil
        seq: list[str] = []
        for i, word in enumerate(words):
            if i and word_boundary is not None:
                seq.append(word_boundary)
            if draws[i]:
                seq.append(silence)
            seq.extend(word)
        if draws[len(words)] and words:
            if word_boundary is not None:
                seq.append(word_boundary)
            seq.append(silence)
        elif draws[len(words)]:
            seq.append(silence)
        out.append(seq)
    return out


def default_symbols(lm: NgramLm) -> dict[str, int]:
    return {w: i + 1 for i, w in enumerate(lm.vocab)}


def lm_to_fst(lm: NgramLm, symbols: Optional[Mapping[str, int]] = None, alphabet: Optional[str] = None) -> Fst:
    """Backoff-as-epsilon acceptor with one state per history.

    Token arcs carry explicit log-probabilities, epsilon arcs carry backoff
    weights, and ``</s>`` probabilities become final weights.
    """
    symbols = default_symbols(lm) if symbols is None else symbols
    contexts = lm.contexts()
    sid = {h: i for i, h in enumerate(contexts)}
    f = Fst(alphabet, alphabet)
    f.add_states(len(contexts))
    start = lm.start_history()
    f.set_start(sid[start] if start in sid else sid[()])
    for h in contexts:
        for w, p in lm.probs[h].items():
            if w == EOS:
                f.set_final(sid[h], p)
                continue
            if w not in symbols:
                raise KeyError(f"token {w!r} has no label")
            nxt = lm._context(h + (w,))
            f.add_arc(sid[h], sid[nxt], symbols[w], symbols[w], p)
        if h:
            bow = lm.backoffs.get(h, NEG_INF)
            if bow != NEG_INF:
                f.add_arc(sid[h], sid[h[1:]], EPSILON, EPSILON, bow)
        if not lm.sentence_end:
            f.set_final(sid[h], 0.0)
    return f


def fst_backoff_score(f: Fst, labels: Sequence[int]) -> float:
    """Score a label string by following explicit arcs, taking the epsilon backoff
    arc only when no explicit arc matches (the exact backoff semantics)."""
    s, total = f.start, 0.0
    for x in labels:
        while True:
            arc = next((a for a in f.arcs(s) if a.ilabel == x), None)
            if arc is not None:
                total += arc.weight
                s = arc.nextstate
                break
            eps = next((a for a in f.arcs(s) if a.ilabel == EPSILON), None)
            if eps is None:
                return NEG_INF
            total += eps.weight
            s = eps.nextstate
    while s not in f.finals:
        eps = next((a for a in f.arcs(s) if a.ilabel == EPSILON), None)
        if eps is None:
            return NEG_INF
        total += eps.weight
        s = eps.nextstate
    return total + f.finals[s]


# ---------------------------------------------------------------------------
# ARPA text


def _fmt(x: float) -> str:
    if x == NEG_INF:
        return "-99.0000000000"
    s = f"{x / LN10:.10f}"
    return "0.0000000000" if s == "-0.0000000000" else s


def write_arpa(lm: NgramLm) -> str:
    entries: dict[int, list[tuple[History, float, Optional[float]]]] = defaultdict(list)
    for h in lm.contexts():
        for w, p in sorted(lm.probs[h].items()):
            gram = h + (w,)
            bow = lm.backoffs.get(gram) if gram in lm.probs else None
            entries[len(gram)].append((gram, p, bow))
    if lm.order > 1 and (BOS,) in lm.probs:
        entries[1].append(((BOS,), NEG_INF, lm.backoffs.get((BOS,))))
    lines = ["\\data\\"]
    for k in range(1, lm.order + 1):
        lines.append(f"ngram {k}={len(entries[k])}")
    for k in range(1, lm.order + 1):
        lines.append("")
        lines.append(f"\\{k}-grams:")
        for gram, p, bow in sorted(entries[k], key=lambda e: e[0]):
            row = f"{_fmt(p)}\t{' '.join(gram)}"
            if bow is not None:
                row += f"\t{_fmt(bow)}"
            lines.append(row)
    lines += ["", "\\end\\", ""]
    return "\n".join(lines)


def read_arpa(text: str) -> NgramLm:
    probs: dict[History, dict[str, float]] = defaultdict(dict)
    backoffs: dict[History, float] = {}
    order, k = 0, 0
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line in ("\\data\\", "\\end\\"):
            continue
        if line.startswith("ngram "):
            order = max(order, int(line[6:].split("=")[0]))
            continue
        if line.startswith("\\") and line.endswith("-grams:"):
            k = int(line[1:].split("-")[0])
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        p10 = float(parts[0])
        gram = tuple(parts[1].split()) if "\t" in line else tuple(parts[1 : 1 + k])
        rest = parts[2:] if "\t" in line else parts[1 + k :]
        p = NEG_INF if p10 <= -99 else p10 * LN10
        if gram != (BOS,):
            probs[gram[:-1]][gram[-1]] = p
        if rest:
            b10 = float(rest[0])
            backoffs[gram] = NEG_INF if b10 <= -99 else b10 * LN10
    if (BOS,) in backoffs and (BOS,) not in probs:
        probs[(BOS,)] = {}
    sentence_end = any(EOS in row for row in probs.values())
    return NgramLm(order, dict(probs), backoffs, sentence_end)


def check_normalized(lm: NgramLm, tol: float = 1e-9) -> None:
    """Raise if some history's full (backed-off) distribution does not sum to one."""
    targets = lm.vocab + ([EOS] if lm.sentence_end else [])
    for h in lm.contexts():
        total = log_sum(lm.logprob(h, w) for w in targets)
        if abs(total) > tol:
            raise ValueError(f"history {h} sums to exp({total})")
