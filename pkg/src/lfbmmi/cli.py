"""Command-line entry point: one subcommand per pipeline step.

Every artifact written here carries the producing config's hash in a
``# config_hash=...`` header line (FST graphs keep it in their metadata,
checkpoints in their binary header). Readers compare it with the hash of the
config they were given and refuse mismatches.

Corpus inputs are a transcript file (``utt_id<TAB>words``) and a directory of
``<utt_id>.lfam`` binary feature files.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from typing import Optional

import numpy as np

from . import __version__
from . import decode as dec
from . import graphs, lm as lmmod, loss, pipeline as P, trainer, units
from .graphs import DenGraph, NumGraph
from .pipeline import PipelineConfig
from .wfst import NoPathError

FORMATS = {
    "features": f"{trainer.FEATURE_MAGIC.decode()} v1",
    "checkpoint": f"{trainer.CHECKPOINT_MAGIC.decode()} v{trainer.CHECKPOINT_VERSION}",
    "fst": "text v1",
    "lm": "arpa",
    "units": "tsv v1",
    "alignments": "tsv v1",
    "hypotheses": "tsv v1",
}


class CliError(Exception):
    pass


def version_string() -> str:
    formats = ", ".join(f"{k} {v}" for k, v in FORMATS.items())
    return f"lfbmmi {__version__} (formats: {formats})"


class _VersionAction(argparse.Action):
    def __init__(self, option_strings, dest, **kwargs):
        super().__init__(option_strings, dest, nargs=0, default=argparse.SUPPRESS, help="print versions and exit")

    def __call__(self, parser, namespace, values, option_string=None):
        print(version_string())
        parser.exit()


# ---------------------------------------------------------------------------
# artifact headers


def with_header(body: str, **meta: str) -> str:
    return "".join(f"# {k}={v}\n" for k, v in meta.items()) + body


def split_header(text: str) -> tuple[dict[str, str], str]:
    meta = {}
    lines = text.splitlines(keepends=True)
    k = 0
    while k < len(lines) and lines[k].startswith("# ") and "=" in lines[k]:
        key, val = lines[k][2:].rstrip("\n").split("=", 1)
        meta[key] = val
        k += 1
    return meta, "".join(lines[k:])


def check_hash(meta: dict[str, str], cfg: PipelineConfig, path: str) -> None:
    got = meta.get("config_hash")
    if got is None:
        raise CliError(f"{path}: no config_hash in artifact")
    if got != cfg.hash():
        raise CliError(f"{path}: produced by config {got}, current config is {cfg.hash()}")


def read_file(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def write_file(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# readers and writers for CLI-level artifacts


def write_units(us: P.UnitSet, cfg: PipelineConfig) -> str:
    meta = {"config_hash": cfg.hash(), "inventory_hash": graphs.inventory_hash(us.inv)}
    if us.tree is not None:
        meta["tree"] = us.tree.to_json()
    return with_header(us.inv.to_tsv(), **meta)


def read_units(path: str, cfg: Optional[PipelineConfig]) -> P.UnitSet:
    text = read_file(path)
    meta, _ = split_header(text)
    if cfg is not None:
        check_hash(meta, cfg, path)
    tree = units.ChenoneTree.from_json(meta["tree"]) if "tree" in meta else None
    return P.UnitSet(units.UnitInventory.from_tsv(text), tree)


def write_alignments(segs: dict[str, list[tuple[int, int, int]]], inv, cfg: PipelineConfig) -> str:
    body = "".join(
        f"{u}\t{' '.join(f'{x},{s},{e}' for x, s, e in segs[u])}\n" for u in sorted(segs)
    )
    return with_header(body, config_hash=cfg.hash(), inventory_hash=graphs.inventory_hash(inv))


def read_alignments(path: str, inv) -> dict[str, list[tuple[int, int, int]]]:
    """Alignments come from another system; they must match its inventory."""
    meta, body = split_header(read_file(path))
    if meta.get("inventory_hash") != graphs.inventory_hash(inv):
        raise CliError(f"{path}: alignments do not match the source inventory")
    out = {}
    for line in body.splitlines():
        if not line.strip():
            continue
        utt, rest = line.split("\t")
        out[utt] = [tuple(int(v) for v in item.split(",")) for item in rest.split()]
    return out


def write_nums(nums: dict[str, NumGraph]) -> str:
    """Several numerators in one file, separated by blank lines."""
    return "\n".join(nums[u].to_text() for u in sorted(nums))


def read_nums(path: str, cfg: PipelineConfig) -> dict[str, NumGraph]:
    out = {}
    for block in read_file(path).split("\n\n"):
        if not block.strip():
            continue
        num = NumGraph.from_text(block)
        check_hash(num.metadata, cfg, path)
        out[num.utt_id] = num
    return out


def read_den(path: str, cfg: PipelineConfig) -> DenGraph:
    den = DenGraph.from_text(read_file(path))
    check_hash(den.metadata, cfg, path)
    return den


def read_lm(path: str, cfg: PipelineConfig) -> lmmod.NgramLm:
    meta, body = split_header(read_file(path))
    check_hash(meta, cfg, path)
    return lmmod.read_arpa(body)


def read_model(path: str, cfg: PipelineConfig) -> trainer.Checkpoint:
    with open(path, "rb") as fh:
        ck = trainer.Checkpoint.from_bytes(fh.read())
    if ck.config_hash != cfg.hash():
        raise CliError(f"{path}: produced by config {ck.config_hash}, current config is {cfg.hash()}")
    return ck


def load_features(directory: str, ids) -> dict[str, np.ndarray]:
    feats = {}
    for u in ids:
        path = os.path.join(directory, u + ".lfam")
        if not os.path.exists(path):
            raise CliError(f"missing features for utterance {u}: {path}")
        feats[u] = trainer.read_features(path)
    return feats


def read_corpus(transcripts: Optional[str], features: Optional[str]) -> P.Corpus:
    """Transcripts and features; without transcripts, every feature file counts."""
    if transcripts:
        trans = trainer.read_transcripts(read_file(transcripts))
    else:
        if not features:
            raise CliError("need --transcripts or --features")
        ids = sorted(f[: -len(".lfam")] for f in os.listdir(features) if f.endswith(".lfam"))
        trans = {u: [] for u in ids}
    return P.Corpus(trans, load_features(features, sorted(trans)) if features else {})


def source_alignments(args, corpus: P.Corpus):
    """(segments, source inventory) when --alignments is given."""
    if not args.alignments:
        return None, None
    if not args.src_units:
        raise CliError("--alignments needs --src-units")
    src = read_units(args.src_units, None).inv
    ali = read_alignments(args.alignments, src)
    missing = [u for u in corpus.ids if u not in ali]
    if missing:
        raise CliError(f"no alignment for utterance(s): {' '.join(missing[:5])}")
    return ali, src


# ---------------------------------------------------------------------------
# subcommands


def cmd_units(args, cfg):
    corpus = read_corpus(args.transcripts, args.features)
    ali, src = source_alignments(args, corpus)
    us = P.build_units(cfg, corpus, ali, src)
    write_file(args.out, write_units(us, cfg))


def cmd_lm(args, cfg):
    corpus = read_corpus(args.transcripts, None)
    if args.kind == "word":
        model = P.word_lm(cfg, corpus)
    else:
        us = read_units(args.units, cfg) if args.units else None
        if us is None:
            raise CliError("token LM needs --units")
        ali, src = source_alignments(args, corpus)
        model = P.token_lm(cfg, corpus, us, ali, src)
    write_file(args.out, with_header(lmmod.write_arpa(model), config_hash=cfg.hash(), kind=args.kind))


def cmd_graph_den(args, cfg):
    us = read_units(args.units, cfg)
    write_file(args.out, P.build_den(cfg, read_lm(args.lm, cfg), us).to_text())


def _chenone_alignments(args, cfg, corpus, us):
    if cfg.unit_type != "chenone":
        return None
    ali, src = source_alignments(args, corpus)
    if ali is None:
        raise CliError("chenone systems need --alignments and --src-units")
    return P.chenone_alignments(ali, corpus, src, us)


def cmd_graph_num(args, cfg):
    corpus = read_corpus(args.transcripts, None)
    us = read_units(args.units, cfg)
    chali = _chenone_alignments(args, cfg, corpus, us)
    write_file(args.out, write_nums(P.build_nums(cfg, corpus, us, chali)))


def cmd_loss_eval(args, cfg):
    """One line per numerator: utt_id, objective, output frames."""
    if bool(args.model) == bool(args.logits):
        raise CliError("give exactly one of --model and --logits")
    nums = read_nums(args.nums, cfg)
    den = loss.CompiledGraph(read_den(args.den, cfg).fst)
    ids = sorted(nums)
    if args.model:
        if not args.features:
            raise CliError("--model needs --features")
        ck = read_model(args.model, cfg)
        lcfg = ck.loss_config(boost=cfg.boost)
        feats = load_features(args.features, ids)
        logits = {u: ck.model.logits(feats[u]) for u in ids}
    else:
        lcfg = loss.LossConfig(kappa=cfg.kappa, boost=cfg.boost)
        logits = {u: m.astype(np.float64) for u, m in load_features(args.logits, ids).items()}
    lines = []
    for u in ids:
        res = loss.lfbmmi_loss(nums[u], den, logits[u], lcfg)
        lines.append(f"{u}\t{res.objective!r}\t{len(logits[u])}\n")
    _emit(args.out, "".join(lines))


def cmd_train(args, cfg):
    corpus = read_corpus(args.transcripts, args.features)
    us = read_units(args.units, cfg)
    nums = read_nums(args.nums, cfg)
    den = read_den(args.den, cfg) if args.den else None
    chali = _chenone_alignments(args, cfg, corpus, us)
    log_lines = []

    def on_epoch(ck, entry):
        log_lines.append(f"{entry.stage}\t{entry.epoch}\t{entry.objective!r}\t{entry.frames}\t{entry.skipped}\n")

    try:
        ck, _ = P.train(cfg, corpus, us, den, nums, chali, on_epoch=on_epoch)
    except trainer.TrainingDiverged as e:
        if e.last_good is not None:
            e.last_good.config_hash = cfg.hash()
            with open(args.out + ".last_good", "wb") as fh:
                fh.write(e.last_good.to_bytes())
        raise
    with open(args.out, "wb") as fh:
        fh.write(ck.to_bytes())
    if args.log:
        write_file(args.log, "".join(log_lines))


def cmd_align(args, cfg):
    corpus = read_corpus(args.transcripts, args.features)
    us = read_units(args.units, cfg)
    ck = read_model(args.model, cfg)
    nums = read_nums(args.nums, cfg)
    missing = [u for u in corpus.ids if u not in nums]
    if missing:
        raise CliError(f"no numerator for utterance(s): {' '.join(missing[:5])}")
    alis = P.align(ck, corpus, us, nums)
    write_file(args.out, write_alignments(P.alignment_segments(alis, us.inv), us.inv, cfg))


def cmd_decode(args, cfg):
    corpus = read_corpus(None, args.features)
    us = read_units(args.units, cfg)
    ck = read_model(args.model, cfg)
    if args.graph and os.path.exists(args.graph):
        graph = dec.DecodeGraph.from_text(read_file(args.graph))
        check_hash(graph.metadata, cfg, args.graph)
    else:
        if not args.word_lm:
            raise CliError("need --word-lm to build the decode graph")
        wlm = read_lm(args.word_lm, cfg)
        graph = P.decode_graph(cfg, wlm, P.lexicon(wlm.vocab, us), us)
        if args.graph:
            write_file(args.graph, graph.to_text())
    start = time.perf_counter()
    hyps = P.decode(cfg, ck, graph, corpus, us)
    elapsed = time.perf_counter() - start
    frames = sum(len(x) for x in corpus.features.values())
    audio_s = frames * cfg.frame_ms / 1000.0
    write_file(args.out, with_header(dec.write_hypotheses(hyps), config_hash=cfg.hash()))
    if audio_s > 0:
        print(f"rtf\t{elapsed / audio_s:.4f}", file=sys.stderr)


def _ref_times(path: str) -> dict:
    _, body = split_header(read_file(path))
    return {u: (h.words, h.word_times) for u, h in dec.read_hypotheses(body).items()}


def cmd_score(args, cfg):
    refs = trainer.read_transcripts(read_file(args.transcripts))
    meta, body = split_header(read_file(args.hyps))
    if cfg is not None:
        check_hash(meta, cfg, args.hyps)
    hyps = dec.read_hypotheses(body)
    lines = [f"wer\t{dec.wer(refs, {u: h.words for u, h in hyps.items()})!r}\n"]
    if args.ref_times:
        stride = cfg.stride if cfg is not None else args.stride
        frame_ms = cfg.frame_ms if cfg is not None else args.frame_ms
        value = dec.tse(_ref_times(args.ref_times), hyps, frame_ms, stride)
        lines.append(f"tse_ms\t{'NA' if value is None else repr(value)}\n")
    _emit(args.out, "".join(lines))


def _emit(path: Optional[str], text: str) -> None:
    if path and path != "-":
        write_file(path, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lfbmmi", description="Lattice-free boosted MMI toolkit")
    p.add_argument("--version", action=_VersionAction)
    p.add_argument("--workers", type=int, default=None, help="bound on parallel utterance evaluations")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, need_config=True):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=need_config, help="pipeline config (ini)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.set_defaults(func=fn)
        return sp

    def corpus_args(sp, transcripts=True, features=False):
        if transcripts:
            sp.add_argument("--transcripts", required=True)
        if features:
            sp.add_argument("--features", required=True, help="directory of <utt_id>.lfam files")

    def ali_args(sp):
        sp.add_argument("--alignments", help="label-segment alignments from a source system")
        sp.add_argument("--src-units", help="unit inventory of the source system")

    sp = add("units", cmd_units)
    corpus_args(sp)
    sp.add_argument("--features", help="needed for chenone units")
    ali_args(sp)
    sp.add_argument("--out", required=True)

    sp = add("lm", cmd_lm)
    corpus_args(sp)
    sp.add_argument("--kind", choices=["token", "word"], default="token")
    sp.add_argument("--units")
    ali_args(sp)
    sp.add_argument("--out", required=True)

    sp = add("graph-num", cmd_graph_num)
    corpus_args(sp)
    sp.add_argument("--units", required=True)
    ali_args(sp)
    sp.add_argument("--out", required=True)

    sp = add("graph-den", cmd_graph_den)
    sp.add_argument("--units", required=True)
    sp.add_argument("--lm", required=True)
    sp.add_argument("--out", required=True)

    sp = add("loss-eval", cmd_loss_eval)
    sp.add_argument("--den", required=True)
    sp.add_argument("--nums", required=True)
    sp.add_argument("--model")
    sp.add_argument("--features", help="input features (with --model)")
    sp.add_argument("--logits", help="directory of <utt_id>.lfam logit matrices")
    sp.add_argument("--out", default="-")

    sp = add("train", cmd_train)
    corpus_args(sp, features=True)
    sp.add_argument("--units", required=True)
    sp.add_argument("--nums", required=True)
    sp.add_argument("--den", help="required for MMI stages")
    ali_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", help="per-epoch objective log")

    sp = add("align", cmd_align)
    corpus_args(sp, features=True)
    sp.add_argument("--units", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--nums", required=True)
    sp.add_argument("--out", required=True)

    sp = add("decode", cmd_decode)
    sp.add_argument("--features", required=True)
    sp.add_argument("--units", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--word-lm")
    sp.add_argument("--graph", help="decode graph; built from --word-lm and cached here if missing")
    sp.add_argument("--out", required=True)

    sp = add("score", cmd_score, need_config=False)
    sp.add_argument("--transcripts", required=True, help="reference transcripts")
    sp.add_argument("--hyps", required=True)
    sp.add_argument("--ref-times", help="reference word times in the hypothesis format")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--frame-ms", type=float, default=10.0)
    sp.add_argument("--out", default="-")
    return p


def load_config(args) -> Optional[PipelineConfig]:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    if not args.config:
        return None
    return PipelineConfig.from_ini(read_file(args.config), overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        args.func(args, cfg)
    except (CliError, ValueError, KeyError, OSError, NoPathError, trainer.TrainingDiverged, FloatingPointError) as e:
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {args.command}: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
