"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 1-6 compare the dynamic-programming code with brute-force oracles;
7 and 8 train toy systems end to end on the synthetic corpus; 9 checks
determinism and serialization.
"""

import itertools
import math
import random
import time

import numpy as np
import pytest

from lfbmmi import decode as dec
from lfbmmi import graphs, lm as lmmod, loss, pipeline as P, synth, topology, trainer, units, wfst
from lfbmmi.graphs import SIL_TOKEN
from lfbmmi.loss import LossConfig, forward_backward
from lfbmmi.topology import TopologySpec
from lfbmmi.units import Unit, UnitInventory
from lfbmmi.wfst import Fst

from oracles import (
    brute_forward_backward,
    central_difference,
    chain_expansions,
    ctc_preimage,
    ctc_textbook,
    graph_paths,
    hmm1_expansions,
    logsumexp,
    random_acceptor,
)

TOPOLOGIES = ("ctc", "hmm1", "chain")


def reweight(f, rng):
    """Copy of ``f`` with random arc and final weights."""
    out = Fst(f.itype, f.otype)
    out.add_states(f.num_states)
    out.set_start(f.start)
    for s, a in f.all_arcs():
        out.add_arc(s, a.nextstate, a.ilabel, a.olabel, rng.uniform(-2.0, 0.5))
    for s in f.finals:
        out.set_final(s, rng.uniform(-1.0, 0.0))
    return out


def max_rel_err(a, b):
    """Largest deviation relative to the reference's scale; the 1e-4 floor
    keeps identically-zero gradients from turning rounding noise into error."""
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-4))


# ---------------------------------------------------------------------------
# 1. forward-backward against path enumeration


def topology_instance(kind, rng):
    """A weighted graph of at most 5 states built from the topology, with its inventory."""
    base = UnitInventory([Unit("char", "a"), Unit("char", "b")], "mono-char")
    if kind == "hmm1":
        base = units.build_char_inventory(["ab"])
    inv = base.with_topology(kind)
    chars = [inv.id(Unit("char", c)) for c in "ab"]
    spec = TopologySpec(kind)
    if kind == "ctc" and rng.random() < 0.5:
        # CTC denominator from a random 2-state HMM acceptor
        hmm = Fst("units", "units")
        hmm.add_states(2)
        hmm.set_start(0)
        for _ in range(rng.randint(1, 4)):
            u = rng.choice(chars)
            hmm.add_arc(rng.randrange(2), rng.randrange(2), units.unit_label(u), units.unit_label(u))
        hmm.set_final(rng.randrange(2))
        f = graphs.hmm_den_to_ctc_den(graphs.DenGraph(hmm, {"topology": "hmm1"}), inv).fst
    else:
        n = 1 if kind == "ctc" else rng.randint(1, 2)
        labels = [rng.choice(chars) for _ in range(n)]
        f = topology.numerator_fst(labels, spec, inv)
    return reweight(f, rng), inv


def test_criterion_1_forward_backward_oracle(criterion):
    start = time.perf_counter()
    worst_z = worst_occ = 0.0
    count = 0
    for seed, kind in enumerate(TOPOLOGIES):
        rng = random.Random(seed)
        done = 0
        while done < 200:
            f, inv = topology_instance(kind, rng)
            T = rng.randint(1, 6)
            U = len(inv)
            assert f.num_states <= 5 and U <= 4
            if not graph_paths(f, T):
                continue
            scores = np.random.default_rng(rng.randrange(10**9)).normal(size=(T, U))
            want_z, want_occ = brute_forward_backward(f, scores)
            z, occ = forward_backward(f, scores)
            worst_z = max(worst_z, abs(z - want_z))
            worst_occ = max(worst_occ, float(np.abs(occ - want_occ).max()))
            done += 1
        count += done
    elapsed = time.perf_counter() - start
    ok = worst_z <= 1e-9 and worst_occ <= 1e-9 and elapsed < 30
    criterion(1, ok, f"{count} instances, max |dlogZ| {worst_z:.1e}, max |docc| {worst_occ:.1e}, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 2. boosted objective against direct enumeration


def random_den(seed):
    rng = random.Random(seed)
    while True:
        f = random_acceptor(rng, num_units=4, max_arcs=8)
        T = rng.randint(1, 6)
        if graph_paths(f, T):
            return f, np.random.default_rng(seed).normal(size=(T, 4)), rng
        seed += 1000


def eq1_by_enumeration(num, den, scores, b):
    """log sum over numerator paths minus log sum over denominator paths, each
    denominator path boosted by -b times its summed per-frame numerator occupancy."""
    num_paths = graph_paths(num, len(scores))
    num_totals = [w + sum(scores[t, u] for t, u in enumerate(us)) for us, w in num_paths]
    zn = logsumexp(num_totals)
    gamma = np.zeros_like(scores)
    for (us, _), s in zip(num_paths, num_totals):
        for t, u in enumerate(us):
            gamma[t, u] += math.exp(s - zn)
    den_totals = [
        w + sum(scores[t, u] - b * gamma[t, u] for t, u in enumerate(us)) for us, w in graph_paths(den, len(scores))
    ]
    return zn - logsumexp(den_totals)


def test_criterion_2_boosted_objective_oracle(criterion):
    worst = 0.0
    exact_mmi = True
    for seed in range(50):
        den, s, rng = random_den(seed)
        paths = graph_paths(den, len(s))
        num = Fst()
        num.add_states(1)
        num.set_start(0)
        for us, _ in rng.sample(paths, min(2, len(paths))):
            prev = 0
            for u in us:
                nxt = num.add_state()
                num.add_arc(prev, nxt, u + 1, u + 1)
                prev = nxt
            num.set_final(prev)
        b = (0.0, 0.1, 0.5, 1.0)[seed % 4]
        kappa = rng.choice([1.0, 0.5])
        r = loss.lfbmmi_loss(num, den, s, LossConfig(kappa=kappa, boost=b))
        worst = max(worst, abs(r.objective - eq1_by_enumeration(num, den, kappa * s, b)))
        # b = 0 is plain LF-MMI, bit for bit
        r0 = loss.lfbmmi_loss(num, den, s, LossConfig(kappa=kappa))
        zn, gn = forward_backward(num, kappa * s)
        zd, gd = forward_backward(den, kappa * s)
        exact_mmi &= r0.objective == zn - zd and np.array_equal(r0.grad, kappa * (gn - gd))
    criterion(2, worst <= 1e-8 and exact_mmi, f"50 instances, max |error| {worst:.1e}, b=0 equals LF-MMI exactly: {exact_mmi}")


# ---------------------------------------------------------------------------
# 3. gradients against central differences


def test_criterion_3_gradient_fidelity(criterion):
    start = time.perf_counter()
    worst = {"MMI": 0.0, "ML": 0.0, "CE": 0.0}
    for seed in range(50):
        den, s, rng = random_den(seed)
        num = wfst.linear_fst([u + 1 for u in graph_paths(den, len(s))[-1][0]])
        cfg = LossConfig(kappa=rng.choice([1.0, 0.7]), boost=0.5 if seed % 2 else 0.0)
        r = loss.lfbmmi_loss(num, den, s, cfg)
        # a single-path numerator has constant occupancies, so the boosted
        # objective itself is differentiated
        mmi = lambda x: loss.lfbmmi_loss(num, den, x, cfg).objective  # noqa: E731
        worst["MMI"] = max(worst["MMI"], max_rel_err(r.grad, central_difference(mmi, s)))

        r = loss.ml_loss(den, s)
        fd = central_difference(lambda x: loss.ml_loss(den, x).objective, s)
        worst["ML"] = max(worst["ML"], max_rel_err(r.grad, fd))

        ali = np.random.default_rng(seed).integers(0, s.shape[1], size=len(s))
        r = loss.ce_loss(ali, s)
        fd = central_difference(lambda x: loss.ce_loss(ali, x).objective, s)
        worst["CE"] = max(worst["CE"], max_rel_err(r.grad, fd))
    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-5 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(3, ok, f"50 instances per mode, max relative error {detail}, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 4. CTC against a textbook dynamic program


def test_criterion_4_ctc_equivalence(criterion):
    rng = random.Random(4)
    worst = 0.0
    done = 0
    while done < 100:
        U = rng.randint(1, 3)
        inv = UnitInventory([Unit("wp", f"p{i}") for i in range(U)] + [units.BLANK], "wordpiece")
        labels = [rng.randrange(U) for _ in range(rng.randint(1, 4))]
        T = rng.randint(1, 10)
        if T < len(labels) + sum(a == b for a, b in zip(labels, labels[1:])):
            continue
        x = np.random.default_rng(done).normal(size=(T, U + 1)) * 2
        num = topology.numerator_fst(labels, TopologySpec("ctc"), inv)
        want = ctc_textbook(loss.log_softmax(x), labels, inv.blank)
        worst = max(worst, abs(loss.ml_loss(num, x).objective - want))
        done += 1
    criterion(4, worst <= 1e-9, f"100 instances, max |error| {worst:.1e}")


# ---------------------------------------------------------------------------
# 5. numerator languages against the collapse mappings


def accepted(f, T):
    return {us for us, _ in graph_paths(f, T)}


def test_criterion_5_topology_semantics(criterion):
    mismatches = checked = 0
    for kind in TOPOLOGIES:
        inv = units.build_char_inventory(["ab"]).with_topology(kind)
        a, b = inv.id(Unit("char", "a")), inv.id(Unit("char", "b"))
        spec = TopologySpec(kind)
        for L in range(1, 4):
            for labels in itertools.product([a, b], repeat=L):
                num = topology.numerator_fst(list(labels), spec, inv)
                for T in range(1, 9):
                    if kind == "ctc":
                        want = ctc_preimage(labels, T, inv.blank)
                    elif kind == "hmm1":
                        want = hmm1_expansions(labels, T)
                    else:
                        want = chain_expansions(labels, T, {l: inv.second_version(l) for l in (a, b)})
                    mismatches += len(accepted(num, T) ^ want)
                    checked += 1
    criterion(5, mismatches == 0, f"{checked} (topology, labels, T) cases, {mismatches} discrepancies")


# ---------------------------------------------------------------------------
# 6. denominator conversion and totals


def random_mono_den(seed):
    rng = random.Random(seed)
    words = ["".join(rng.choice("ab") for _ in range(rng.randint(1, 3))) for _ in range(3)]
    corpus = [[rng.choice(words) for _ in range(rng.randint(1, 3))] for _ in range(4)]
    inv = units.build_char_inventory(["ab"])
    seqs = graphs.char_lm_sequences(corpus, 0.3, seed, word_boundary=False)
    m = lmmod.estimate_ngram(seqs, rng.randint(1, 3), vocab=["a", "b", SIL_TOKEN])
    return graphs.build_den_hmm(m, "none", TopologySpec("hmm1"), inv), inv


def strings_upto(f, T):
    out = {()} if f.start in f.finals else set()
    for k in range(1, T + 1):
        out |= accepted(f, k)
    return out


def test_criterion_6_denominator_construction(criterion):
    problems = []
    worst = 0.0
    for seed in range(20):
        den, inv = random_mono_den(seed)
        ctc_inv = inv.with_topology("ctc")
        ctc = graphs.hmm_den_to_ctc_den(den, ctc_inv)
        if ctc.fst.num_states != 2 * den.fst.num_states:
            problems.append(f"seed {seed}: state count")
        for T in range(1, 6):
            collapsed = {tuple(u for u in x if u != ctc_inv.blank) for x in accepted(ctc.fst, T)}
            if collapsed != strings_upto(den.fst, T):
                problems.append(f"seed {seed} T {T}: language")
            for f, U in ((den.fst, len(inv)), (ctc.fst, len(ctc_inv))):
                paths = graph_paths(f, T)
                if not paths:
                    continue
                z, _ = forward_backward(f, np.zeros((T, U)))
                worst = max(worst, abs(z - logsumexp([w for _, w in paths])))
    ok = not problems and worst <= 1e-9
    criterion(6, ok, f"20 denominators, {len(problems)} structural problems, max |total error| {worst:.1e}")


# ---------------------------------------------------------------------------
# 7 and 8. synthetic end-to-end systems


@pytest.fixture(scope="module")
def corpora():
    train = synth.make_corpus(200, 1, prefix="tr")
    test = synth.make_corpus(50, 2, prefix="te")
    as_corpus = lambda us: P.Corpus({u.utt_id: u.words for u in us}, {u.utt_id: u.features for u in us})  # noqa: E731
    return train, test, as_corpus(train), as_corpus(test)


def reference_spans(utts, stride):
    """True word spans at the output frame rate."""
    return {u.utt_id: (u.words, [(s // stride, -(-e // stride)) for s, e in u.word_times]) for u in utts}


def test_wer(cfg, ck, us, wlm, corpus):
    graph = P.decode_graph(cfg, wlm, P.lexicon(synth.WORDS, us), us)
    hyps = P.decode(cfg, ck, graph, corpus, us)
    return dec.wer(corpus.transcripts, {u: h.words for u, h in hyps.items()}), hyps


test_wer.__test__ = False


@pytest.fixture(scope="module")
def wp_system(corpora):
    train, test, C, TE = corpora
    start = time.perf_counter()
    cfg = P.PipelineConfig(unit_type="wordpiece", topology="ctc", wordpiece_vocab=40, specaugment="none", epochs="2,5")
    us = P.build_units(cfg, C)
    den = P.build_den(cfg, P.token_lm(cfg, C, us), us)
    nums = P.build_nums(cfg, C, us)
    ck, _ = P.train(cfg, C, us, den, nums)
    wer, hyps = test_wer(cfg, ck, us, P.word_lm(cfg, C), TE)
    alis = P.align(ck, C, us, nums)
    elapsed = time.perf_counter() - start
    ali_hyps = P.alignment_hypotheses(alis, C, us)
    return dict(cfg=cfg, wer=wer, seconds=elapsed, hyps=hyps, ali_hyps=ali_hyps)


@pytest.fixture(scope="module")
def bc_system(corpora):
    """Flat-start bi-char HMM trained with plain MMI; source of alignments."""
    train, test, C, TE = corpora
    start = time.perf_counter()
    cfg = P.PipelineConfig(unit_type="bi-char", topology="hmm1", schedule="MMI", epochs="6", boost=0.0, specaugment="none")
    us = P.build_units(cfg, C)
    den = P.build_den(cfg, P.token_lm(cfg, C, us), us)
    nums = P.build_nums(cfg, C, us)
    ck, _ = P.train(cfg, C, us, den, nums)
    alis = P.align(ck, C, us, nums)
    segments = P.alignment_segments(alis, us.inv)
    elapsed = time.perf_counter() - start
    wer, _ = test_wer(cfg, ck, us, P.word_lm(cfg, C), TE)
    ali_tse = dec.tse(reference_spans(train, cfg.stride), P.alignment_hypotheses(alis, C, us), 1.0, 1)
    return dict(cfg=cfg, us=us, segments=segments, seconds=elapsed, wer=wer, ali_tse=ali_tse)


def chenone_system(C, bc, **kw):
    cfg = P.PipelineConfig(unit_type="chenone", specaugment="none", **kw)
    us = P.build_units(cfg, C, bc["segments"], bc["us"].inv)
    chali = P.chenone_alignments(bc["segments"], C, bc["us"].inv, us)
    den = None
    if cfg.schedule != "CE":
        den = P.build_den(cfg, P.token_lm(cfg, C, us, bc["segments"], bc["us"].inv), us)
    nums = P.build_nums(cfg, C, us, chali)
    ck, _ = P.train(cfg, C, us, den, nums, chali)
    return cfg, us, chali, nums, ck


def test_criterion_7_synthetic_end_to_end(criterion, corpora, wp_system, bc_system):
    train, test, C, TE = corpora
    start = time.perf_counter()
    cfg, us, chali, nums, ck = chenone_system(C, bc_system, topology="chain", schedule="CE->MMI", epochs="2,4")
    ch_wer, ch_hyps = test_wer(cfg, ck, us, P.word_lm(cfg, C), TE)
    alis = P.align(ck, C, us, nums)
    ch_seconds = time.perf_counter() - start
    ch_ali = P.alignment_hypotheses(alis, C, us, chali)
    ch_frames = dec.tse(reference_spans(train, cfg.stride), ch_ali, 1.0, 1)
    wp = wp_system
    wp_stride = wp["cfg"].stride
    wp_frames = dec.tse(reference_spans(train, wp_stride), wp["ali_hyps"], 1.0, 1)
    ch_ms = ch_frames * cfg.frame_ms * cfg.stride
    wp_ms = wp_frames * wp["cfg"].frame_ms * wp_stride
    ch_dec_ms = dec.tse(reference_spans(test, cfg.stride), ch_hyps, cfg.frame_ms, cfg.stride)
    wp_dec_ms = dec.tse(reference_spans(test, wp_stride), wp["hyps"], wp["cfg"].frame_ms, wp_stride)
    ok = (
        wp["wer"] <= 0.02
        and ch_wer <= 0.02
        and wp["seconds"] < 180
        and ch_seconds < 180
        and ch_frames <= 2.0
        and ch_ms <= wp_ms
    )
    detail = (
        f"WER wp-CTC {wp['wer']:.3f} ({wp['seconds']:.0f} s), ch-HMM {ch_wer:.3f} ({ch_seconds:.0f} s"
        f", +{bc_system['seconds']:.0f} s alignment model); forced-alignment TSE ch-HMM {ch_frames:.2f} frames"
        f" = {ch_ms:.0f} ms vs wp-CTC {wp_frames:.2f} frames = {wp_ms:.0f} ms;"
        f" decode TSE ch-HMM {ch_dec_ms:.0f} ms, wp-CTC {wp_dec_ms:.0f} ms"
    )
    criterion(7, ok, detail)


def test_criterion_8_alignment_model_workflow(criterion, corpora, bc_system):
    train, test, C, TE = corpora
    cfg, us, chali, nums, ck = chenone_system(C, bc_system, topology="hmm1", schedule="CE", epochs="4")
    wer, _ = test_wer(cfg, ck, us, P.word_lm(cfg, C), TE)
    detail = (
        f"flat-start bc-HMM-MMI: test WER {bc_system['wer']:.3f}, alignment TSE {bc_system['ali_tse']:.2f} frames;"
        f" downstream chenone CE model: test WER {wer:.3f}"
    )
    criterion(8, wer <= 0.05, detail)


# ---------------------------------------------------------------------------
# 9. determinism and formats


def small_corpus():
    utts = synth.make_corpus(12, 9)
    return P.Corpus({u.utt_id: u.words for u in utts}, {u.utt_id: u.features for u in utts})


def build_and_train(cfg, C):
    us = P.build_units(cfg, C)
    den = P.build_den(cfg, P.token_lm(cfg, C, us), us)
    nums = P.build_nums(cfg, C, us)
    ck, log = P.train(cfg, C, us, den, nums)
    graph = P.decode_graph(cfg, P.word_lm(cfg, C), P.lexicon(synth.WORDS, us), us)
    texts = [den.to_text(), graph.to_text()] + [nums[u].to_text() for u in sorted(nums)]
    return us, den, nums, ck, graph, texts, [e.objective for e in log]


def round_trips(C, us, den, nums, ck, graph, cfg):
    """(name, original serialization, re-serialization after parsing) triples."""
    lm_text = lmmod.write_arpa(P.word_lm(cfg, C))
    once = lmmod.write_arpa(lmmod.read_arpa(lm_text))
    num = next(iter(nums.values()))
    feats = next(iter(C.features.values()))
    lex = P.lexicon(synth.WORDS, us)
    hyps = {"a": dec.Hypothesis(["one", "two"], [(0, 3), (5, 9)], -1.0 / 3)}
    tc = {"a": [(1, 0, 4), (2, 4, 7)]}
    items = [
        ("den graph", den.to_text(), graphs.DenGraph.from_text(den.to_text()).to_text()),
        ("numerator", num.to_text(), graphs.NumGraph.from_text(num.to_text()).to_text()),
        ("decode graph", graph.to_text(), dec.DecodeGraph.from_text(graph.to_text()).to_text()),
        ("arpa (after one pass)", once, lmmod.write_arpa(lmmod.read_arpa(once))),
        ("inventory", us.inv.to_tsv(), UnitInventory.from_tsv(us.inv.to_tsv()).to_tsv()),
        ("lexicon", lex.to_tsv(), units.Lexicon.from_tsv(lex.to_tsv()).to_tsv()),
        ("features", trainer.features_to_bytes(feats), trainer.features_to_bytes(
            trainer.features_from_bytes(trainer.features_to_bytes(feats)))),
        ("checkpoint", ck.to_bytes(), trainer.Checkpoint.from_bytes(ck.to_bytes()).to_bytes()),
        ("hypotheses", dec.write_hypotheses(hyps), dec.write_hypotheses(dec.read_hypotheses(dec.write_hypotheses(hyps)))),
        ("time constraints", topology.write_time_constraints(tc),
         topology.write_time_constraints(topology.read_time_constraints(topology.write_time_constraints(tc)))),
        ("config", cfg.to_ini(), P.PipelineConfig.from_ini(cfg.to_ini()).to_ini()),
        ("transcripts", trainer.write_transcripts(C.transcripts),
         trainer.write_transcripts(trainer.read_transcripts(trainer.write_transcripts(C.transcripts)))),
    ]
    # FST weights survive text serialization exactly
    f2, _ = wfst.read_text(den.to_text())
    same_weights = [a.weight for _, a in f2.all_arcs()] == [a.weight for _, a in den.fst.all_arcs()]
    items.append(("fst weights", str(same_weights), "True"))
    return items


def test_criterion_9_determinism_and_formats(criterion, corpora, bc_system):
    C = small_corpus()
    problems = []
    configs = [
        P.PipelineConfig(unit_type="wordpiece", topology="ctc", wordpiece_vocab=30, epochs="1,2", specaugment="large"),
        P.PipelineConfig(unit_type="bi-char", topology="hmm1", schedule="MMI", epochs="2", flat_start_epochs=1,
                         bichar_units=12, specaugment="ld"),
    ]
    for cfg in configs:
        a = build_and_train(cfg, C)
        b = build_and_train(cfg, C)
        if a[5] != b[5]:
            problems.append(f"{cfg.unit_type}: graph text differs between builds")
        if a[3].to_bytes() != b[3].to_bytes() or a[6] != b[6]:
            problems.append(f"{cfg.unit_type}: training is not reproducible")
        for name, x, y in round_trips(C, *a[:5], cfg):
            if x != y:
                problems.append(f"{cfg.unit_type}: {name} does not round-trip")
    # chenone trees and graphs from the same alignments
    _, _, full, _ = corpora
    ch = P.PipelineConfig(unit_type="chenone", topology="chain", specaugment="none")
    t1 = P.build_units(ch, full, bc_system["segments"], bc_system["us"].inv)
    t2 = P.build_units(ch, full, bc_system["segments"], bc_system["us"].inv)
    if t1.tree.to_json() != t2.tree.to_json() or t1.inv.to_tsv() != t2.inv.to_tsv():
        problems.append("chenone tree build is not reproducible")
    if units.ChenoneTree.from_json(t1.tree.to_json()).to_json() != t1.tree.to_json():
        problems.append("chenone tree does not round-trip")
    criterion(9, not problems, "; ".join(problems) or "byte-identical rebuilds, retrains and round trips")
