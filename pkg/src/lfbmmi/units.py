"""Modeling-unit inventories (mono-char, bi-char, chenone, wordpiece) and lexicons.

Unit ids are dense ``0..U-1``. Inside FSTs a unit id ``u`` is written as label
``u + 1`` because label 0 is epsilon; :func:`unit_label` and
:func:`label_unit` convert between the two.
"""

from __future__ import annotations

import json
import logging
import math
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .wfst import EPSILON, Fst

logger = logging.getLogger(__name__)

WORD_MARKER = "▁"
BOUNDARY = "#"
DEFAULT_CHARSET = frozenset(string.ascii_lowercase + "'")


def unit_label(u: int) -> int:
    return u + 1


def label_unit(label: int) -> int:
    if label == EPSILON:
        raise ValueError("epsilon has no unit id")
    return label - 1


@dataclass(frozen=True, order=True)
class Unit:
    """One output unit. ``kind`` is blank/sil/char/bichar/chenone/wp/v2."""

    kind: str
    symbol: str = ""

    def __str__(self) -> str:
        if self.kind == "blank":
            return "<blk>"
        if self.kind == "sil":
            return "<sil>"
        prefix = {"char": "c", "bichar": "bc", "chenone": "ch", "wp": "wp", "v2": "v2"}[self.kind]
        return f"{prefix}:{self.symbol}"

    @classmethod
    def parse(cls, text: str) -> "Unit":
        if text == "<blk>":
            return cls("blank")
        if text == "<sil>":
            return cls("sil")
        prefix, _, sym = text.partition(":")
        kinds = {"c": "char", "bc": "bichar", "ch": "chenone", "wp": "wp", "v2": "v2"}
        if prefix not in kinds or not sym:
            raise ValueError(f"bad unit descriptor {text!r}")
        return cls(kinds[prefix], sym)


BLANK = Unit("blank")
SILENCE = Unit("sil")


class UnitInventory:
    def __init__(self, units: Sequence[Unit], unit_type: str = ""):
        self.units = list(units)
        self.unit_type = unit_type
        self._index = {u: i for i, u in enumerate(self.units)}
        if len(self._index) != len(self.units):
            raise ValueError("duplicate units in inventory")

    def __len__(self) -> int:
        return len(self.units)

    def __iter__(self):
        return iter(self.units)

    def __contains__(self, unit: Unit) -> bool:
        return unit in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, UnitInventory) and self.units == other.units

    def __repr__(self) -> str:
        return f"UnitInventory({self.unit_type!r}, U={len(self)})"

    def id(self, unit: Unit) -> int:
        try:
            return self._index[unit]
        except KeyError:
            raise KeyError(f"unit {unit} not in inventory") from None

    def get(self, unit: Unit) -> Optional[int]:
        return self._index.get(unit)

    @property
    def blank(self) -> Optional[int]:
        return self._index.get(BLANK)

    @property
    def silence(self) -> Optional[int]:
        return self._index.get(SILENCE)

    @property
    def has_second_versions(self) -> bool:
        return any(u.kind == "v2" for u in self.units)

    def base_units(self) -> list[int]:
        """Ids usable as labels: everything except blank and second versions."""
        return [i for i, u in enumerate(self.units) if u.kind not in ("blank", "v2")]

    def second_version(self, uid: int) -> int:
        return self.id(Unit("v2", str(uid)))

    def base_of(self, uid: int) -> int:
        u = self.units[uid]
        return int(u.symbol) if u.kind == "v2" else uid

    def with_topology(self, kind: str) -> "UnitInventory":
        """Add a blank (CTC) or second-version units (chain); 1-state HMM adds nothing."""
        base = [u for u in self.units if u.kind not in ("blank", "v2")]
        if kind == "ctc":
            return UnitInventory(base + [BLANK], self.unit_type)
        if kind == "chain":
            return UnitInventory(base + [Unit("v2", str(i)) for i in range(len(base))], self.unit_type)
        if kind == "hmm1":
            return UnitInventory(base, self.unit_type)
        raise ValueError(f"unknown topology {kind!r}")

    # bi-char lookup ------------------------------------------------------
    def bichar_unit(self, left: Optional[str], c: str) -> int:
        """Bi-char unit for ``c`` after ``left`` (None at word start) with fallback."""
        if left is not None:
            uid = self._index.get(Unit("bichar", f"{left}|{c}"))
            if uid is not None:
                return uid
        return self.id(Unit("bichar", f"*|{c}"))

    # serialization -------------------------------------------------------
    def to_tsv(self) -> str:
        head = f"# unit_type={self.unit_type}\n" if self.unit_type else ""
        return head + "".join(f"{i}\t{u}\n" for i, u in enumerate(self.units))

    @classmethod
    def from_tsv(cls, text: str) -> "UnitInventory":
        units, unit_type = [], ""
        for line in text.splitlines():
            if line.startswith("# unit_type="):
                unit_type = line.split("=", 1)[1]
                continue
            if not line.strip() or line.startswith("#"):
                continue
            i, desc = line.split("\t")
            if int(i) != len(units):
                raise ValueError(f"inventory ids must be dense, got {i} at position {len(units)}")
            units.append(Unit.parse(desc))
        return cls(units, unit_type)


def corpus_words(corpus: Iterable[str]) -> list[list[str]]:
    return [line.split() for line in corpus]


# ---------------------------------------------------------------------------
# inventories


def _check_charset(corpus: Sequence[str], charset) -> None:
    bad = sorted({ch for line in corpus for ch in line if not ch.isspace() and ch not in charset})
    if bad:
        codes = ", ".join(f"U+{ord(c):04X} {unicodedata.name(c, '?')}" for c in bad)
        raise ValueError(f"characters outside the declared character set: {codes}")


def build_char_inventory(corpus: Sequence[str], charset=DEFAULT_CHARSET) -> UnitInventory:
    if not corpus or not any(line.split() for line in corpus):
        raise ValueError("empty corpus")
    _check_charset(corpus, charset)
    chars = sorted({ch for line in corpus for ch in line if not ch.isspace()})
    return UnitInventory([SILENCE] + [Unit("char", c) for c in chars], "mono-char")


def bigram_counts(corpus: Sequence[str]) -> Counter:
    """Word-internal (left, char) counts; word-initial characters have no left context."""
    counts: Counter = Counter()
    for words in corpus_words(corpus):
        for w in words:
            for left, c in zip(w, w[1:]):
                counts[(left, c)] += 1
    return counts


def cluster_bichar(corpus: Sequence[str], max_units: int, charset=DEFAULT_CHARSET) -> UnitInventory:
    """Frequency-rank clustering: the most frequent word-internal bigrams get their own
    unit, everything else shares the per-character fallback unit ``*|c``.

    ``max_units`` counts silence and the fallbacks.
    """
    chars = [u.symbol for u in build_char_inventory(corpus, charset).units if u.kind == "char"]
    if max_units < len(chars) + 1:
        raise ValueError(f"max_units={max_units} below floor {len(chars) + 1} (chars + silence)")
    budget = max_units - len(chars) - 1
    ranked = sorted(bigram_counts(corpus).items(), key=lambda kv: (-kv[1], kv[0]))
    kept = sorted(pair for pair, _ in ranked[:budget])
    units = [SILENCE] + [Unit("bichar", f"*|{c}") for c in chars]
    units += [Unit("bichar", f"{l}|{c}") for l, c in kept]
    return UnitInventory(units, "bi-char")


# ---------------------------------------------------------------------------
# chenone tree


def _gauss_ll(n: float, s: np.ndarray, ss: np.ndarray, var_floor: float) -> float:
    if n <= 0:
        return 0.0
    mean = s / n
    var = np.maximum(ss / n - mean * mean, var_floor)
    return float(-0.5 * n * np.sum(np.log(2 * math.pi * var) + 1.0))


@dataclass
class _Node:
    center: str
    members: list  # (left, right) pairs with statistics
    question: Optional[tuple[str, frozenset]] = None
    yes: Optional["_Node"] = None
    no: Optional["_Node"] = None
    leaf_id: int = -1


@dataclass
class ChenoneTree:
    """Maps a tri-char state (left, center, right) to a chenone leaf id."""

    roots: dict[str, _Node]
    num_leaves: int
    gains: list[float] = field(default_factory=list)

    def leaf(self, left: str, center: str, right: str) -> int:
        node = self.roots.get(center)
        if node is None:
            raise KeyError(f"no tree for center character {center!r}")
        while node.question is not None:
            side, q = node.question
            ctx = left if side == "left" else right
            node = node.yes if ctx in q else node.no
        return node.leaf_id

    def to_json(self) -> str:
        def enc(node: _Node):
            if node.question is None:
                return {"leaf": node.leaf_id}
            side, q = node.question
            return {"side": side, "q": sorted(q), "yes": enc(node.yes), "no": enc(node.no)}

        return json.dumps(
            {"num_leaves": self.num_leaves, "gains": self.gains, "roots": {c: enc(n) for c, n in sorted(self.roots.items())}},
            sort_keys=True,
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, text: str) -> "ChenoneTree":
        data = json.loads(text)

        def dec(center, d):
            if "leaf" in d:
                return _Node(center, [], leaf_id=d["leaf"])
            return _Node(center, [], (d["side"], frozenset(d["q"])), dec(center, d["yes"]), dec(center, d["no"]))

        return cls({c: dec(c, d) for c, d in data["roots"].items()}, data["num_leaves"], data["gains"])


def default_questions(symbols: Iterable[str]) -> list[frozenset]:
    return [frozenset([s]) for s in sorted(set(symbols))]


def build_chenone_tree(
    frames: Iterable[tuple[Optional[tuple[str, str, str]], np.ndarray]],
    questions: Optional[Sequence[frozenset]] = None,
    target_leaves: int = 1632,
    min_gain: float = 0.0,
    var_floor: float = 1e-3,
) -> tuple[UnitInventory, ChenoneTree]:
    """Greedy top-down state tying of tri-char states under single diagonal Gaussians.

    ``frames`` yields ``((left, center, right), feature)`` pairs; a ``None``
    triple marks a frame without a tri-char state (silence, unaligned) and is
    skipped. Splits are chosen globally by log-likelihood gain until
    ``target_leaves`` is reached or no split gains more than ``min_gain``.
    """
    stats: dict[tuple[str, str, str], list] = {}
    skipped = 0
    for triple, x in frames:
        if triple is None:
            skipped += 1
            continue
        x = np.asarray(x, dtype=np.float64)
        st = stats.get(triple)
        if st is None:
            stats[triple] = [1.0, x.copy(), x * x]
        else:
            st[0] += 1.0
            st[1] += x
            st[2] += x * x
    if skipped:
        logger.warning("chenone tree: %d frames without tri-char statistics excluded", skipped)
    if not stats:
        raise ValueError("no tri-char statistics")
    centers = sorted({c for _, c, _ in stats})
    if target_leaves < len(centers):
        raise ValueError(f"target_leaves={target_leaves} below number of center characters {len(centers)}")
    if questions is None:
        questions = default_questions([l for l, _, _ in stats] + [r for _, _, r in stats])

    def pooled(members):
        n = sum(stats[m][0] for m in members)
        s = sum(stats[m][1] for m in members)
        ss = sum(stats[m][2] for m in members)
        return n, s, ss

    def best_split(node: _Node):
        members = node.members
        parent = _gauss_ll(*pooled(members), var_floor)
        best = None
        for side in ("left", "right"):
            pos = 0 if side == "left" else 2
            for q in questions:
                yes = [m for m in members if m[pos] in q]
                if not yes or len(yes) == len(members):
                    continue
                no = [m for m in members if m[pos] not in q]
                gain = _gauss_ll(*pooled(yes), var_floor) + _gauss_ll(*pooled(no), var_floor) - parent
                if best is None or gain > best[0]:
                    best = (gain, side, q, yes, no)
        if best is None:
            return None
        if best[0] <= min_gain + 1e-9 * max(1.0, abs(parent)):
            return None
        return best

    roots = {c: _Node(c, sorted(t for t in stats if t[1] == c)) for c in centers}
    leaves: list[_Node] = [roots[c] for c in centers]
    candidates = {id(n): best_split(n) for n in leaves}
    gains: list[float] = []
    while len(leaves) < target_leaves:
        pick = None
        for i, node in enumerate(leaves):
            cand = candidates[id(node)]
            if cand is not None and (pick is None or cand[0] > pick[1][0]):
                pick = (i, cand)
        if pick is None:
            break
        i, (gain, side, q, yes, no) = pick
        node = leaves[i]
        node.question = (side, q)
        node.yes = _Node(node.center, yes)
        node.no = _Node(node.center, no)
        gains.append(gain)
        leaves[i : i + 1] = [node.yes, node.no]
        del candidates[id(node)]
        candidates[id(node.yes)] = best_split(node.yes)
        candidates[id(node.no)] = best_split(node.no)

    next_id = 0

    def number(node: _Node) -> None:
        nonlocal next_id
        if node.question is None:
            node.leaf_id = next_id
            next_id += 1
        else:
            number(node.yes)
            number(node.no)

    for c in centers:
        number(roots[c])
    tree = ChenoneTree(roots, next_id, gains)
    inv = UnitInventory([SILENCE] + [Unit("chenone", str(i)) for i in range(next_id)], "chenone")
    return inv, tree


def word_trichars(word: str) -> list[tuple[str, str, str]]:
    padded = BOUNDARY + word + BOUNDARY
    return [(padded[i - 1], padded[i], padded[i + 1]) for i in range(1, len(padded) - 1)]


# ---------------------------------------------------------------------------
# wordpieces


def train_wordpiece_vocab(
    corpus: Sequence[str], vocab_size: int, silence: bool = False, charset=DEFAULT_CHARSET
) -> UnitInventory:
    """Byte-pair-encoding merges over marker-prefixed words.

    The base vocabulary holds every character both bare and with the word
    marker, so any word over the seen characters is tokenizable. Merges pick
    the most frequent adjacent pair, ties going to the smallest pair.
    """
    if not corpus or not any(line.split() for line in corpus):
        raise ValueError("empty corpus")
    _check_charset(corpus, charset)
    word_freq = Counter(w for words in corpus_words(corpus) for w in words)
    chars = sorted({c for w in word_freq for c in w})
    base = sorted(set(chars) | {WORD_MARKER + c for c in chars})
    if vocab_size < len(base):
        raise ValueError(f"vocab_size={vocab_size} below character floor {len(base)}")
    vocab = list(base)
    seen = set(vocab)
    segs = {w: [WORD_MARKER + w[0]] + list(w[1:]) for w in sorted(word_freq)}
    while len(vocab) < vocab_size:
        pairs: Counter = Counter()
        for w, pieces in segs.items():
            for a, b in zip(pieces, pieces[1:]):
                pairs[(a, b)] += word_freq[w]
        if not pairs:
            break
        (a, b), _ = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        merged = a + b
        for w, pieces in segs.items():
            out, i = [], 0
            while i < len(pieces):
                if i + 1 < len(pieces) and pieces[i] == a and pieces[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(pieces[i])
                    i += 1
            segs[w] = out
        if merged not in seen:
            seen.add(merged)
            vocab.append(merged)
    units = ([SILENCE] if silence else []) + [Unit("wp", p) for p in vocab]
    return UnitInventory(units, "wordpiece")


def tokenize_wordpiece(word: str, inv: UnitInventory) -> list[int]:
    """Greedy longest-match segmentation of the marker-prefixed word."""
    pieces = {u.symbol: i for i, u in enumerate(inv.units) if u.kind == "wp"}
    longest = max((len(p) for p in pieces), default=0)
    text = WORD_MARKER + word
    out, i = [], 0
    while i < len(text):
        for j in range(min(len(text), i + longest), i, -1):
            uid = pieces.get(text[i:j])
            if uid is not None:
                out.append(uid)
                i = j
                break
        else:
            bad = text[i + 1] if i == 0 and len(text) > 1 else text[i]
            raise ValueError(f"cannot tokenize {word!r}: character {bad!r} not covered by the vocabulary")
    return out


def detokenize_wordpiece(ids: Sequence[int], inv: UnitInventory) -> list[str]:
    text = "".join(inv.units[i].symbol for i in ids)
    return [w for w in text.split(WORD_MARKER) if w]


# ---------------------------------------------------------------------------
# lexicon


@dataclass
class Lexicon:
    """word -> unit-id sequences. Word labels in FSTs are ``index in words + 1``."""

    entries: dict[str, list[tuple[int, ...]]]

    @property
    def words(self) -> list[str]:
        return sorted(self.entries)

    def word_label(self, word: str) -> int:
        return self.words.index(word) + 1

    def word_labels(self) -> dict[str, int]:
        return {w: i + 1 for i, w in enumerate(self.words)}

    def to_tsv(self) -> str:
        return "".join(
            f"{w}\t{' '.join(map(str, pron))}\n" for w in self.words for pron in self.entries[w]
        )

    @classmethod
    def from_tsv(cls, text: str) -> "Lexicon":
        entries: dict[str, list[tuple[int, ...]]] = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            w, units = line.split("\t")
            entries.setdefault(w, []).append(tuple(int(x) for x in units.split()))
        return cls(entries)


def word_units(word: str, inv: UnitInventory, tree: Optional[ChenoneTree] = None) -> tuple[int, ...]:
    """Unit sequence of one word under the inventory's unit type."""
    kind = inv.unit_type
    if kind == "mono-char":
        return tuple(inv.id(Unit("char", c)) for c in word)
    if kind == "bi-char":
        return tuple(inv.bichar_unit(word[i - 1] if i else None, c) for i, c in enumerate(word))
    if kind == "chenone":
        if tree is None:
            raise ValueError("chenone lexicon needs the decision tree")
        return tuple(inv.id(Unit("chenone", str(tree.leaf(*t)))) for t in word_trichars(word))
    if kind == "wordpiece":
        return tuple(tokenize_wordpiece(word, inv))
    raise ValueError(f"unknown unit type {kind!r}")


def build_lexicon(words: Iterable[str], inv: UnitInventory, tree: Optional[ChenoneTree] = None) -> Lexicon:
    return Lexicon({w: [word_units(w, inv, tree)] for w in sorted(set(words))})


def build_lexicon_fst(lex: Lexicon, allow_silence_between_words: bool, silence: Optional[int] = None) -> Fst:
    """Closure transducer from unit labels to word labels; weights are all zero.

    The word label sits on the first arc of each pronunciation. With silence
    allowed, the hub state carries a silence self-loop, so silence may appear
    before, between and after words.
    """
    if not lex.entries:
        raise ValueError("empty lexicon")
    f = Fst("units", "words")
    hub = f.add_state()
    f.set_start(hub)
    f.set_final(hub)
    labels = lex.word_labels()
    for w in lex.words:
        for pron in lex.entries[w]:
            if not pron:
                raise ValueError(f"empty pronunciation for {w!r}")
            prev = hub
            for i, u in enumerate(pron):
                nxt = hub if i == len(pron) - 1 else f.add_state()
                f.add_arc(prev, nxt, unit_label(u), labels[w] if i == 0 else EPSILON)
                prev = nxt
    if allow_silence_between_words:
        if silence is None:
            raise ValueError("silence unit id required")
        f.add_arc(hub, hub, unit_label(silence), EPSILON)
    return f
