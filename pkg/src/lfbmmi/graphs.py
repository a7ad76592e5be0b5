"""Denominator and numerator graph builders for every supported unit/topology cell.

Supported cells (unit type, topology family):

    wordpiece  HMM / CTC      mono-char  HMM      bi-char  HMM      chenone  HMM / CTC

"HMM" means either the 1-state or the chain topology. Character LMs use two
extra tokens: ``<sil>`` for silence and ``<wb>`` for word boundaries, which the
context transducers consume without emitting a unit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import lm as lmmod
from . import topology as topo
from . import wfst
from .lm import NgramLm
from .topology import TimeConstraint, TopologySpec
from .units import (
    BOUNDARY,
    ChenoneTree,
    Lexicon,
    Unit,
    UnitInventory,
    tokenize_wordpiece,
    unit_label,
    word_trichars,
    word_units,
)
from .wfst import EPSILON, Fst

SIL_TOKEN = "<sil>"
WB_TOKEN = "<wb>"
UNIT_TYPES = ("mono-char", "bi-char", "chenone", "wordpiece")

# (unit_type, topology family) -> allowed training schedules
CELLS = {
    ("wordpiece", "hmm"): ("ML", "MMI", "ML->MMI"),
    ("mono-char", "hmm"): ("ML", "MMI", "ML->MMI"),
    ("bi-char", "hmm"): ("ML", "MMI", "ML->MMI"),
    ("chenone", "hmm"): ("CE", "MMI", "CE->MMI"),
    ("chenone", "ctc"): ("ML", "MMI", "ML->MMI"),
    ("wordpiece", "ctc"): ("ML", "MMI", "ML->MMI"),
}


def family(topology: str) -> str:
    return "ctc" if topology == "ctc" else "hmm"


def check_cell(unit_type: str, topology: str, schedule: Optional[str] = None) -> None:
    if unit_type not in UNIT_TYPES:
        raise ValueError(f"unknown unit type {unit_type!r}")
    TopologySpec(topology)
    key = (unit_type, family(topology))
    if key not in CELLS:
        raise ValueError(f"unsupported cell: {unit_type} with {topology} topology")
    if schedule is not None and schedule not in CELLS[key]:
        raise ValueError(f"schedule {schedule!r} not valid for {unit_type}/{topology}; expected one of {CELLS[key]}")


def needs_alignments(unit_type: str) -> bool:
    return unit_type == "chenone"


def has_silence(unit_type: str, topology: str) -> bool:
    return not (unit_type == "wordpiece" and topology == "ctc")


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def inventory_hash(inv: UnitInventory) -> str:
    return content_hash(inv.to_tsv())


# ---------------------------------------------------------------------------
# graph containers


@dataclass
class DenGraph:
    fst: Fst
    metadata: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        return wfst.write_text(self.fst, {"graph": "den", **self.metadata})

    @classmethod
    def from_text(cls, text: str) -> "DenGraph":
        f, header = wfst.read_text(text)
        header.pop("graph", None)
        return cls(f, header)


@dataclass
class NumGraph:
    """Numerator transducer: output units on the input tape, label-position
    markers on the output tape (label ``i`` writes ``i + 1``)."""

    fst: Fst
    utt_id: str = ""
    metadata: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        return wfst.write_text(self.fst, {"graph": "num", "utt_id": self.utt_id, **self.metadata})

    @classmethod
    def from_text(cls, text: str) -> "NumGraph":
        f, header = wfst.read_text(text)
        header.pop("graph", None)
        utt = header.pop("utt_id", "")
        return cls(f, utt, header)


# ---------------------------------------------------------------------------
# token LM training data


def char_lm_sequences(
    transcripts: Sequence[Sequence[str]], p_sil: float, seed: int, word_boundary: bool = True
) -> list[list[str]]:
    """Character token strings with randomly inserted silence."""
    utts = [[list(w) for w in words] for words in transcripts]
    return lmmod.insert_silence(utts, SIL_TOKEN, p_sil, seed, WB_TOKEN if word_boundary else None)


def wordpiece_lm_sequences(
    transcripts: Sequence[Sequence[str]], inv: UnitInventory, p_sil: float = 0.0, seed: int = 0
) -> list[list[str]]:
    utts = [[[inv.units[u].symbol for u in tokenize_wordpiece(w, inv)] for w in words] for words in transcripts]
    if inv.silence is None:
        p_sil = 0.0
    return lmmod.insert_silence(utts, SIL_TOKEN, p_sil, seed)


def alignment_lm_sequence(segments: Sequence[tuple[int, int, int]], words: Sequence[str], inv: UnitInventory) -> list[str]:
    """Character tokens with silence where an alignment placed it.

    ``segments`` must hold one segment per label position (as produced by
    forced alignment), so the non-silence segments line up with the characters.
    """
    sil = inv.silence
    chars = [(wi, c) for wi, w in enumerate(words) for c in w]
    out: list[str] = []
    k = 0
    for u, _, _ in segments:
        after_char = bool(out) and out[-1] not in (WB_TOKEN, SIL_TOKEN)
        if u == sil:
            word_done = k == len(chars) or (k > 0 and chars[k][0] != chars[k - 1][0])
            if after_char and word_done:
                out.append(WB_TOKEN)
            out.append(SIL_TOKEN)
            continue
        if k >= len(chars):
            raise ValueError("alignment has more segments than the transcript has characters")
        wi, c = chars[k]
        if after_char and chars[k - 1][0] != wi:
            out.append(WB_TOKEN)
        out.append(c)
        k += 1
    if k != len(chars):
        raise ValueError("alignment has fewer segments than the transcript has characters")
    return out


def chenone_segments(
    segments: Sequence[tuple[int, int, int]],
    words: Sequence[str],
    src_inv: UnitInventory,
    ch_inv: UnitInventory,
    tree: ChenoneTree,
) -> list[tuple[int, int, int]]:
    """Relabel a per-position character alignment with chenone (and silence) ids."""
    leaves = [ch_inv.id(Unit("chenone", str(tree.leaf(*t)))) for w in words for t in word_trichars(w)]
    out, k = [], 0
    for u, s, e in segments:
        if u == src_inv.silence:
            out.append((ch_inv.silence, s, e))
            continue
        if k >= len(leaves):
            raise ValueError("alignment has more segments than the transcript has characters")
        out.append((leaves[k], s, e))
        k += 1
    if k != len(leaves):
        raise ValueError("alignment has fewer segments than the transcript has characters")
    return out


def chenone_frame_stats(segments, words, src_inv, features):
    """(left, center, right) triple per output frame for chenone tree building;
    silence frames get ``None``."""
    triples = [t for w in words for t in word_trichars(w)]
    out: list = [None] * len(features)
    k = 0
    for u, s, e in segments:
        if u == src_inv.silence:
            continue
        for t in range(s, min(e, len(features))):
            out[t] = triples[k]
        k += 1
    return list(zip(out, features))


# ---------------------------------------------------------------------------
# context transducers: units (input) -> LM tokens (output)


def token_symbols(lm: NgramLm) -> dict[str, int]:
    return lmmod.default_symbols(lm)


def identity_context(inv: UnitInventory, symbols: dict[str, int]) -> Fst:
    """One-state map from unit to the LM token of the same name."""
    f = Fst("labels", "tokens")
    s = f.add_state()
    f.set_start(s)
    f.set_final(s)
    for tok, lab in symbols.items():
        u = _token_unit(tok, inv)
        f.add_arc(s, s, unit_label(u), lab)
    return f


def _token_unit(tok: str, inv: UnitInventory) -> int:
    if tok == SIL_TOKEN:
        if inv.silence is None:
            raise ValueError("LM has silence but the inventory does not")
        return inv.silence
    for kind in ("char", "wp"):
        uid = inv.get(Unit(kind, tok))
        if uid is not None:
            return uid
    raise ValueError(f"LM token {tok!r} has no unit in the inventory")


def _lm_chars(symbols: dict[str, int]) -> list[str]:
    return [t for t in symbols if t not in (SIL_TOKEN, WB_TOKEN)]


def bichar_context(inv: UnitInventory, symbols: dict[str, int]) -> Fst:
    """States: word start, and "previous character c" inside a word.

    Word-initial characters use the fallback unit; ``<wb>`` and silence reset
    the context. ``<wb>`` is only accepted right after a character, which keeps
    the epsilon part acyclic.
    """
    chars = _lm_chars(symbols)
    f = Fst("labels", "tokens")
    start = f.add_state()
    f.set_start(start)
    f.set_final(start)
    prev = {c: f.add_state() for c in chars}
    for c in chars:
        f.set_final(prev[c])
    sources = [(start, None)] + [(prev[l], l) for l in chars]
    for s, left in sources:
        for c in chars:
            f.add_arc(s, prev[c], unit_label(inv.bichar_unit(left, c)), symbols[c])
        if SIL_TOKEN in symbols:
            f.add_arc(s, start, unit_label(inv.silence), symbols[SIL_TOKEN])
        if WB_TOKEN in symbols and left is not None:
            f.add_arc(s, start, EPSILON, symbols[WB_TOKEN])
    return f


def chenone_context(inv: UnitInventory, tree: ChenoneTree, symbols: dict[str, int]) -> Fst:
    """Tri-char context with one character of lookahead.

    State ``(l, c)`` means character ``c`` (after ``l``) is read but its unit
    is not yet emitted; the next token decides the right context. Silence
    resets the context.
    """
    chars = _lm_chars(symbols)
    f = Fst("labels", "tokens")
    start = f.add_state()
    f.set_start(start)
    f.set_final(start)
    end = f.add_state()
    f.set_final(end)
    pending = {}
    for l in [BOUNDARY] + chars:
        for c in chars:
            pending[(l, c)] = f.add_state()

    def leaf(l, c, r):
        return unit_label(inv.id(Unit("chenone", str(tree.leaf(l, c, r)))))

    for c in chars:
        f.add_arc(start, pending[(BOUNDARY, c)], EPSILON, symbols[c])
    if SIL_TOKEN in symbols:
        f.add_arc(start, start, unit_label(inv.silence), symbols[SIL_TOKEN])
    for (l, c), s in pending.items():
        for r in chars:
            f.add_arc(s, pending[(c, r)], leaf(l, c, r), symbols[r])
        f.add_arc(s, end, leaf(l, c, BOUNDARY), EPSILON)
        if WB_TOKEN in symbols:
            f.add_arc(s, start, leaf(l, c, BOUNDARY), symbols[WB_TOKEN])
        if SIL_TOKEN in symbols:
            mid = f.add_state()
            f.add_arc(s, mid, leaf(l, c, BOUNDARY), symbols[SIL_TOKEN])
            f.add_arc(mid, start, unit_label(inv.silence), EPSILON)
    return wfst.trim(f)


# ---------------------------------------------------------------------------
# denominators


def _finish_den(composed: Fst, metadata: dict[str, str]) -> DenGraph:
    acc = wfst.project(wfst.trim(composed), "input")
    acc = wfst.trim(wfst.remove_epsilon(acc))
    if acc.is_empty():
        raise ValueError("denominator composition is empty")
    acc.itype = acc.otype = "units"
    return DenGraph(acc, metadata)


def _den_metadata(lm: NgramLm, inv: UnitInventory, kind: str, context: str) -> dict[str, str]:
    return {
        "unit_type": inv.unit_type,
        "topology": kind,
        "context": context,
        "lm_order": str(lm.order),
        "lm_hash": lm.content_hash(),
        "inventory_hash": inventory_hash(inv),
        "silence_context": "reset",
    }


def build_den_hmm(
    lm: NgramLm, context: str, spec: TopologySpec, inv: UnitInventory, tree: Optional[ChenoneTree] = None
) -> DenGraph:
    """HMM-family denominator: topology o context o token LM, input-projected,
    epsilon-free and trimmed."""
    if spec.kind == "ctc":
        raise ValueError("build_den_hmm needs an HMM topology")
    expected = {"mono-char": "none", "wordpiece": "none", "bi-char": "bichar", "chenone": "tree"}
    if expected.get(inv.unit_type) != context:
        raise ValueError(f"context {context!r} does not match unit type {inv.unit_type!r}")
    symbols = token_symbols(lm)
    if context == "bichar":
        c = bichar_context(inv, symbols)
    elif context == "tree":
        if tree is None:
            raise ValueError("chenone context needs the decision tree")
        c = chenone_context(inv, tree, symbols)
    else:
        c = identity_context(inv, symbols)
    g = lmmod.lm_to_fst(lm, symbols, "tokens")
    cg = wfst.compose(c, g)
    hcg = wfst.compose(topo.topology_fst(spec, inv), wfst.project(cg, "input"))
    return _finish_den(hcg, _den_metadata(lm, inv, spec.kind, context))


def split_for_blank(f: Fst, blank: int) -> Fst:
    """Give every state ``s`` a twin ``s'`` that consumes blanks.

    ``s -> s'`` and ``s' -> s'`` read blank; ``s'`` copies all of ``s``'s
    outgoing arcs and its final weight. Output labels of blank arcs are epsilon,
    so transducers (decoding graphs) can be split too.
    """
    n = f.num_states
    out = Fst(f.itype, f.otype)
    out.add_states(2 * n)
    if f.start is not None:
        out.set_start(f.start)
    b = unit_label(blank)
    for s in f.states():
        twin = n + s
        for a in f.arcs(s):
            out.add_arc(s, a.nextstate, a.ilabel, a.olabel, a.weight)
        out.add_arc(s, twin, b, EPSILON)
        out.add_arc(twin, twin, b, EPSILON)
        for a in f.arcs(s):
            out.add_arc(twin, a.nextstate, a.ilabel, a.olabel, a.weight)
        if s in f.finals:
            out.set_final(s, f.finals[s])
            out.set_final(twin, f.finals[s])
    return out


def hmm_den_to_ctc_den(den: DenGraph, inv: UnitInventory) -> DenGraph:
    """Convert a 1-state-HMM denominator into a CTC one by state splitting.

    ``inv`` is the CTC inventory (base units plus blank, same base ids).
    """
    if inv.blank is None:
        raise ValueError("CTC conversion requires a blank unit in the inventory")
    if den.metadata.get("topology", "hmm1") != "hmm1":
        raise ValueError("CTC conversion requires a 1-state HMM denominator")
    meta = dict(den.metadata)
    meta.update(topology="ctc", inventory_hash=inventory_hash(inv), converted_from="hmm1")
    return DenGraph(split_for_blank(den.fst, inv.blank), meta)


def build_den_ctc_wordpiece(lm: NgramLm, inv: UnitInventory) -> DenGraph:
    """CTC topology o wordpiece LM."""
    if inv.blank is None:
        raise ValueError("CTC denominator requires a blank unit")
    if inv.silence is not None:
        raise ValueError("wordpiece CTC inventory must not contain silence")
    symbols = token_symbols(lm)
    g = lmmod.lm_to_fst(lm, symbols, "tokens")
    cg = wfst.project(wfst.compose(identity_context(inv, symbols), g), "input")
    composed = wfst.compose(topo.topology_fst(TopologySpec("ctc"), inv), cg)
    return _finish_den(composed, _den_metadata(lm, inv, "ctc", "none"))


def build_den(
    lm: NgramLm, inv: UnitInventory, topology: str, tree: Optional[ChenoneTree] = None
) -> DenGraph:
    """Dispatch on the cell. ``inv`` must already carry the topology's extra units."""
    check_cell(inv.unit_type, topology)
    context = {"mono-char": "none", "wordpiece": "none", "bi-char": "bichar", "chenone": "tree"}[inv.unit_type]
    if topology != "ctc":
        return build_den_hmm(lm, context, TopologySpec(topology), inv, tree)
    if inv.unit_type == "wordpiece":
        return build_den_ctc_wordpiece(lm, inv)
    hmm_inv = inv.with_topology("hmm1")
    den = build_den_hmm(lm, context, TopologySpec("hmm1"), hmm_inv, tree)
    return hmm_den_to_ctc_den(den, inv)


# ---------------------------------------------------------------------------
# numerators


def transcript_labels(
    words: Sequence[str], inv: UnitInventory, lex: Optional[Lexicon] = None, tree: Optional[ChenoneTree] = None
) -> tuple[list[int], list[int]]:
    """Label sequence of a transcript plus the label positions of word boundaries."""
    labels: list[int] = []
    boundaries = [0]
    for w in words:
        if lex is not None and w in lex.entries:
            pron = lex.entries[w][0]
        elif inv.unit_type == "wordpiece":
            pron = tuple(tokenize_wordpiece(w, inv))
        elif lex is not None:
            raise ValueError(f"word {w!r} not in lexicon")
        else:
            pron = word_units(w, inv, tree)
        labels.extend(pron)
        boundaries.append(len(labels))
    return labels, boundaries


def dedup(labels: Sequence[int]) -> list[int]:
    return [u for i, u in enumerate(labels) if i == 0 or labels[i - 1] != u]


def build_num(
    utt_id: str,
    words: Sequence[str],
    inv: UnitInventory,
    topology: str,
    lex: Optional[Lexicon] = None,
    alignment: Optional[Sequence[tuple[int, int, int]]] = None,
    tolerance: float = 5,
    sil_prob: Optional[float] = None,
) -> NumGraph:
    """Per-utterance numerator following the cell's recipe.

    For chenone systems ``alignment`` holds chenone/silence segments (one per
    label position, tiling the utterance); the HMM cell applies them as time
    constraints, the CTC cell only uses their de-duplicated label sequence.
    """
    check_cell(inv.unit_type, topology)
    spec = TopologySpec(topology)
    meta = {"topology": topology, "unit_type": inv.unit_type, "inventory_hash": inventory_hash(inv)}
    if inv.unit_type == "chenone":
        if alignment is None:
            raise ValueError(f"utterance {utt_id}: chenone numerators need an alignment")
        labels = [u for u, _, _ in alignment]
        if topology == "ctc":
            meta["num_labels"] = str(len(dedup(labels)))
            f = topo.numerator_transducer(dedup(labels), spec, inv)
            meta["time_constrained"] = "0"
        else:
            f = topo.numerator_transducer(labels, spec, inv)
            f = topo.apply_time_constraints(f, TimeConstraint(list(alignment), tolerance), inv)
            meta["time_constrained"] = "1"
            meta["num_labels"] = str(len(labels))
            meta["tolerance"] = str(tolerance)
        return NumGraph(f, utt_id, meta)
    labels, boundaries = transcript_labels(words, inv, lex)
    if not labels:
        raise ValueError(f"utterance {utt_id}: empty transcript")
    allow_sil = topology != "ctc" and inv.silence is not None
    f = topo.numerator_transducer(
        labels, spec, inv, allow_silence=allow_sil, boundaries=boundaries if allow_sil else None, sil_prob=sil_prob
    )
    meta["time_constrained"] = "0"
    meta["num_labels"] = str(len(labels))
    return NumGraph(f, utt_id, meta)
