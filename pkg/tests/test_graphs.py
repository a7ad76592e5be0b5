import itertools
import math
import random
from collections import defaultdict

import numpy as np
import pytest

from lfbmmi import graphs, lm as lmmod, topology, units, wfst
from lfbmmi.graphs import SIL_TOKEN, WB_TOKEN
from lfbmmi.topology import TopologySpec
from lfbmmi.units import BOUNDARY, Unit

from oracles import compositions, graph_paths, logsumexp

HMM1 = TopologySpec("hmm1")


def totals_by_string(f, T):
    acc = defaultdict(list)
    for u, w in graph_paths(f, T):
        acc[u].append(w)
    return {u: logsumexp(ws) for u, ws in acc.items()}


def expand_hmm(unit_seq, T):
    """Every 1-state-HMM frame string of length T for a unit sequence."""
    for d in compositions(T, len(unit_seq)):
        yield tuple(u for u, n in zip(unit_seq, d) for _ in range(n))


def oracle_totals(lm, to_units, T, max_tokens):
    """Token strings -> unit strings -> HMM expansions, weighted by the exact LM score."""
    tokens = lm.vocab
    acc = defaultdict(list)
    for n in range(0, max_tokens + 1):
        for seq in itertools.product(tokens, repeat=n):
            us = to_units(list(seq))
            if us is None or (not us and T > 0):
                continue
            score = lm.score(list(seq))
            if score == -math.inf:
                continue
            for frames in expand_hmm(us, T):
                acc[frames].append(score)
    return {u: logsumexp(ws) for u, ws in acc.items()}


def assert_same_totals(got, want):
    assert set(got) == set(want)
    for k in want:
        assert got[k] == pytest.approx(want[k], abs=1e-9)


def runs(seq):
    """Split a token list into character runs; None if <wb> is not right after a char."""
    out, cur, prev = [], [], None
    for t in seq:
        if t == WB_TOKEN:
            if prev in (None, WB_TOKEN, SIL_TOKEN):
                return None
            out.append(cur)
            cur = []
        elif t == SIL_TOKEN:
            if cur:
                out.append(cur)
                cur = []
            out.append(SIL_TOKEN)
        else:
            cur.append(t)
        prev = t
    if cur:
        out.append(cur)
    return out


def test_mono_char_uniform_unigram_closed_form():
    inv = units.build_char_inventory(["ab"])
    m = lmmod.estimate_ngram([["a", "b", SIL_TOKEN]], 1, smoothing="none", sentence_end=False)
    den = graphs.build_den_hmm(m, "none", HMM1, inv)
    for T in range(1, 6):
        # 3^n token strings of n tokens, each with probability 3^-n, times C(T-1, n-1) durations
        want = math.log(sum(math.comb(T - 1, n - 1) for n in range(1, T + 1)))
        got = logsumexp([w for _, w in graph_paths(den.fst, T)])
        assert got == pytest.approx(want, abs=1e-9)
        to_units = lambda seq: [inv.id(Unit("char", t)) if t != SIL_TOKEN else inv.silence for t in seq]
        assert_same_totals(totals_by_string(den.fst, T), oracle_totals(m, to_units, T, T))


def test_bichar_den_matches_token_oracle():
    corpus = ["ab ba", "aab"]
    inv = units.cluster_bichar(corpus, 5)
    seqs = graphs.char_lm_sequences([l.split() for l in corpus], 0.5, 0)
    m = lmmod.estimate_ngram(seqs, 2, smoothing="none")
    den = graphs.build_den_hmm(m, "bichar", HMM1, inv)

    def to_units(seq):
        parts = runs(seq)
        if parts is None:
            return None
        out = []
        for p in parts:
            if p == SIL_TOKEN:
                out.append(inv.silence)
            else:
                out += [inv.bichar_unit(p[i - 1] if i else None, c) for i, c in enumerate(p)]
        return out

    for T in range(1, 5):
        assert_same_totals(totals_by_string(den.fst, T), oracle_totals(m, to_units, T, 2 * T))


def small_tree(words, leaves=6, seed=0):
    rng = np.random.default_rng(seed)
    frames = []
    for w in words:
        for t in units.word_trichars(w):
            for _ in range(4):
                frames.append((t, rng.normal(ord(t[1]) + (ord(t[2]) % 3), 0.1, size=2)))
    return units.build_chenone_tree(frames, target_leaves=leaves)


def test_chenone_den_matches_token_oracle():
    corpus = [["ab", "ba"], ["aab"]]
    inv, tree = small_tree([w for ws in corpus for w in ws])
    seqs = graphs.char_lm_sequences(corpus, 0.5, 1)
    m = lmmod.estimate_ngram(seqs, 2, smoothing="none")
    den = graphs.build_den_hmm(m, "tree", HMM1, inv, tree)

    def leaf(l, c, r):
        return inv.id(Unit("chenone", str(tree.leaf(l, c, r))))

    def to_units(seq):
        parts = runs(seq)
        if parts is None:
            return None
        out = []
        for p in parts:
            if p == SIL_TOKEN:
                out.append(inv.silence)
            else:
                padded = [BOUNDARY] + p + [BOUNDARY]
                out += [leaf(padded[i - 1], padded[i], padded[i + 1]) for i in range(1, len(padded) - 1)]
        return out

    for T in range(1, 5):
        assert_same_totals(totals_by_string(den.fst, T), oracle_totals(m, to_units, T, 2 * T))


def test_context_mismatch_and_empty_errors():
    inv = units.build_char_inventory(["ab"])
    m = lmmod.estimate_ngram([["a", "b"]], 1)
    with pytest.raises(ValueError, match="context"):
        graphs.build_den_hmm(m, "bichar", HMM1, inv)
    with pytest.raises(ValueError):
        graphs.build_den_hmm(lmmod.estimate_ngram([["c"]], 1), "none", HMM1, inv)


def test_wordpiece_ctc_den_blank_interleaving():
    inv = units.UnitInventory([Unit("wp", "▁a"), Unit("wp", "▁b"), units.BLANK], "wordpiece")
    m = lmmod.estimate_ngram([["▁a", "▁b"]], 1, smoothing="none", sentence_end=False)
    den = graphs.build_den_ctc_wordpiece(m, inv)
    blank = inv.blank
    for T in range(1, 6):
        want = defaultdict(list)
        for x in itertools.product(range(3), repeat=T):
            labels = topology.collapse(x, TopologySpec("ctc"), inv)
            want[x].append(len(labels) * math.log(0.5))
        want = {k: logsumexp(v) for k, v in want.items()}
        assert_same_totals(totals_by_string(den.fst, T), want)
    assert den.metadata["lm_order"] == "1"


def test_wordpiece_ctc_den_excluded_piece():
    inv = units.UnitInventory([Unit("wp", "▁a"), Unit("wp", "▁b"), Unit("wp", "c"), units.BLANK], "wordpiece")
    m = lmmod.estimate_ngram([["▁a", "▁b"]], 2, smoothing="none")
    den = graphs.build_den_ctc_wordpiece(m, inv)
    assert all(a.ilabel != units.unit_label(2) for _, a in den.fst.all_arcs())
    with pytest.raises(ValueError, match="silence"):
        graphs.build_den_ctc_wordpiece(m, units.UnitInventory(inv.units + [units.SILENCE], "wordpiece"))


def random_mono_den(seed):
    rng = random.Random(seed)
    words = ["".join(rng.choice("ab") for _ in range(rng.randint(1, 3))) for _ in range(3)]
    corpus = [[rng.choice(words) for _ in range(rng.randint(1, 3))] for _ in range(4)]
    inv = units.build_char_inventory(["ab"])
    seqs = graphs.char_lm_sequences(corpus, 0.3, seed, word_boundary=False)
    m = lmmod.estimate_ngram(seqs, rng.randint(1, 3), vocab=["a", "b", SIL_TOKEN])
    return graphs.build_den_hmm(m, "none", HMM1, inv), inv


def test_hmm_den_to_ctc_den_split_and_language():
    for seed in range(20):
        den, inv = random_mono_den(seed)
        ctc_inv = inv.with_topology("ctc")
        out = graphs.hmm_den_to_ctc_den(den, ctc_inv)
        assert out.fst.num_states == 2 * den.fst.num_states
        blank = ctc_inv.blank
        for T in range(1, 5):
            ctc_lang = totals_by_string(out.fst, T)
            stripped = {tuple(u for u in x if u != blank) for x in ctc_lang}
            hmm_lang = set()
            for k in range(0, T + 1):
                hmm_lang |= set(totals_by_string(den.fst, k)) if k else ({()} if den.fst.start in den.fst.finals else set())
            assert stripped == hmm_lang
            # weight oracle: distribute T-k blanks over the k+1 gaps of each HMM path
            terms = []
            for k in range(0, T + 1):
                if k == 0:
                    if den.fst.start in den.fst.finals:
                        terms.append(den.fst.finals[den.fst.start])
                    continue
                hmm_total = logsumexp([w for _, w in graph_paths(den.fst, k)])
                terms.append(math.log(math.comb(T, k)) + hmm_total)
            got = logsumexp(list(ctc_lang.values()))
            assert got == pytest.approx(logsumexp(terms), abs=1e-9)


def test_ctc_split_collapse_example():
    inv = units.UnitInventory([Unit("wp", "a"), Unit("wp", "b")], "wordpiece")
    f = wfst.linear_fst([units.unit_label(0), units.unit_label(1)])
    den = graphs.DenGraph(f, {"topology": "hmm1"})
    ctc_inv = inv.with_topology("ctc")
    out = graphs.hmm_den_to_ctc_den(den, ctc_inv)
    phi = ctc_inv.blank
    acc3 = set(totals_by_string(out.fst, 3))
    assert (0, phi, 1) in acc3
    assert (phi, 0, 1, phi) in set(totals_by_string(out.fst, 4))
    for x in acc3 | set(totals_by_string(out.fst, 4)):
        assert topology.collapse(x, TopologySpec("ctc"), ctc_inv) == [0, 1]
    with pytest.raises(ValueError, match="blank"):
        graphs.hmm_den_to_ctc_den(den, inv)


def test_den_serialization_round_trip():
    den, _ = random_mono_den(3)
    text = den.to_text()
    again = graphs.DenGraph.from_text(text)
    assert again.to_text() == text
    assert again.metadata == den.metadata
    assert "inventory_hash" in den.metadata and "lm_hash" in den.metadata


# ---------------------------------------------------------------------------
# numerators and the cell table


def test_cell_gating():
    graphs.check_cell("wordpiece", "ctc")
    graphs.check_cell("chenone", "ctc")
    graphs.check_cell("bi-char", "chain")
    with pytest.raises(ValueError, match="unsupported cell"):
        graphs.check_cell("mono-char", "ctc")
    with pytest.raises(ValueError, match="schedule"):
        graphs.check_cell("chenone", "chain", "ML")
    assert not graphs.has_silence("wordpiece", "ctc")
    assert graphs.has_silence("chenone", "ctc")


def test_ch_ctc_label_extraction():
    assert graphs.dedup([3, 3, 3, 1, 1, 2]) == [3, 1, 2]


def test_bichar_num_silence_between_words_only():
    inv = units.cluster_bichar(["ab ba"], 5)
    num = graphs.build_num("u", ["ab", "ba"], inv, "hmm1")
    sil = inv.silence
    acc = {u for u, _ in graph_paths(num.fst, 5)}
    a0, b1 = inv.bichar_unit(None, "a"), inv.bichar_unit("a", "b")
    b0, a1 = inv.bichar_unit(None, "b"), inv.bichar_unit("b", "a")
    assert (a0, b1, sil, b0, a1) in acc
    assert (a0, sil, b1, b0, a1) not in acc
    assert num.metadata["time_constrained"] == "0"


def test_wp_ctc_num_fig1():
    inv = units.UnitInventory([Unit("wp", "▁I"), Unit("wp", "▁a"), Unit("wp", "m"), units.BLANK], "wordpiece")
    num = graphs.build_num("u", ["am"], inv, "ctc")
    acc = {u for u, _ in graph_paths(num.fst, 3)}
    assert acc == {(1, 2, 3), (3, 1, 2), (1, 3, 2), (1, 1, 2), (1, 2, 2)}
    with pytest.raises(ValueError, match="'x'"):
        graphs.build_num("u", ["ax"], inv, "ctc")


def test_chenone_nums_need_alignment_and_use_it():
    inv, tree = small_tree(["ab", "ba"])
    segs_char = [(1, 0, 2), (2, 2, 4), (0, 4, 5), (2, 5, 6), (1, 6, 8)]
    char_inv = units.build_char_inventory(["ab"])
    ch = graphs.chenone_segments(segs_char, ["ab", "ba"], char_inv, inv, tree)
    assert ch[2][0] == inv.silence and len(ch) == 5
    with pytest.raises(ValueError, match="alignment"):
        graphs.build_num("u", ["ab", "ba"], inv, "hmm1")
    num = graphs.build_num("u", ["ab", "ba"], inv, "hmm1", alignment=ch, tolerance=0)
    acc = {u for u, _ in graph_paths(num.fst, 8)}
    assert acc == {tuple(u for u, s, e in ch for _ in range(e - s))}
    assert num.metadata["time_constrained"] == "1"
    ctc_inv = inv.with_topology("ctc")
    num_ctc = graphs.build_num("u", ["ab", "ba"], ctc_inv, "ctc", alignment=ch)
    assert num_ctc.metadata["time_constrained"] == "0"
    for x, _ in graph_paths(num_ctc.fst, 6):
        assert topology.collapse(x, TopologySpec("ctc"), ctc_inv, drop_silence=False) == graphs.dedup([u for u, _, _ in ch])


def test_alignment_lm_sequence_format():
    inv = units.build_char_inventory(["ab"])
    segs = [(0, 0, 1), (1, 1, 2), (2, 2, 3), (0, 3, 4), (2, 4, 5), (1, 5, 6), (0, 6, 7)]
    assert graphs.alignment_lm_sequence(segs, ["ab", "ba"], inv) == [
        SIL_TOKEN, "a", "b", WB_TOKEN, SIL_TOKEN, "b", "a", WB_TOKEN, SIL_TOKEN,
    ]
    assert graphs.alignment_lm_sequence(segs[1:3] + segs[4:6], ["ab", "ba"], inv) == ["a", "b", WB_TOKEN, "b", "a"]


@pytest.mark.parametrize(
    "unit_type,top",
    [("mono-char", "hmm1"), ("bi-char", "chain"), ("wordpiece", "hmm1"), ("wordpiece", "ctc"), ("chenone", "hmm1"), ("chenone", "ctc")],
)
def test_num_paths_inside_den(unit_type, top):
    corpus = [["ab", "b"], ["ba", "ab"], ["b"]]
    lines = [" ".join(ws) for ws in corpus]
    tree = None
    if unit_type == "mono-char":
        base = units.build_char_inventory(lines)
    elif unit_type == "bi-char":
        base = units.cluster_bichar(lines, 5)
    elif unit_type == "wordpiece":
        base = units.train_wordpiece_vocab(lines, 6, silence=top != "ctc")
    else:
        base, tree = small_tree([w for ws in corpus for w in ws], leaves=4)
    inv = base.with_topology(top)
    if unit_type == "wordpiece":
        seqs = graphs.wordpiece_lm_sequences(corpus, inv, 0.3, 0)
    else:
        seqs = graphs.char_lm_sequences(corpus, 0.3, 0, word_boundary=unit_type in ("bi-char", "chenone"))
    m = lmmod.estimate_ngram(seqs, 2)
    den = graphs.build_den(m, inv, top, tree)
    assert not any(a.ilabel == wfst.EPSILON for _, a in den.fst.all_arcs())
    den_ids = {a.ilabel for _, a in den.fst.all_arcs()}
    assert den_ids <= {units.unit_label(u) for u in range(len(inv))}
    words = corpus[1]
    align = None
    if unit_type == "chenone":
        leaves = [inv.id(Unit("chenone", str(tree.leaf(*t)))) for w in words for t in units.word_trichars(w)]
        align = [(u, i, i + 1) for i, u in enumerate(leaves)]
    num = graphs.build_num("u", words, inv, top, alignment=align, tolerance=1)
    for T in range(4, 7):
        den_strings = {u for u, _ in graph_paths(den.fst, T)}
        for x, _ in graph_paths(num.fst, T):
            assert x in den_strings
