"""Command-line interface. One subcommand per pipeline stage plus a
`pipeline` command that runs everything; stages are resumable and only
recompute when --force is given or outputs are missing.

Exit codes: 0 success, 2 missing inputs or bad usage, 3 invariant breach
(including training divergence and corrupt checkpoints), 4 generation
provider failure. Errors print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import InputError, InvariantError, ProviderError
from .pipeline import (PipelineConfig, Workdir, run_pipeline,
                       stage_build_coarse, stage_build_fine, stage_devset,
                       stage_embed, stage_evaluate, stage_filter,
                       stage_index, stage_ingest, stage_iterate,
                       stage_report, stage_score, stage_synth,
                       stage_train_coarse)

_OVERRIDE_FLAGS = {
    "seed_rng": "rng_seed",
    "threads": "embed.workers",
    "rounds": "fine.rounds",
    "keep_fraction": "fine.keep_fraction",
    "threshold": "coarse.threshold",
    "k": "eval.ks",
}


def _collect_overrides(args: argparse.Namespace) -> dict:
    out: dict = {}
    for attr, dotted in _OVERRIDE_FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[dotted] = value
    if getattr(args, "no_cam", False):
        out["fine.cam"] = False
    return out


def _say(msg: str) -> None:
    sys.stdout.write(msg + "\n")


def cmd_synth(cfg, wd, args):
    stage_synth(cfg, wd, args.force)
    _say(f"corpus ready: {wd.corpus}")


def cmd_ingest(cfg, wd, args):
    stage_ingest(cfg, wd, args.corpus, args.seeds, args.lexicon, args.force)
    _say(f"corpus ready: {wd.corpus}")


def cmd_embed(cfg, wd, args):
    stage_embed(cfg, wd, args.force)
    _say(f"embeddings ready: {wd.embeddings}")


def cmd_index(cfg, wd, args):
    stage_index(cfg, wd, args.force)
    _say(f"index ready: {wd.index}")


def cmd_devset(cfg, wd, args):
    stage_devset(cfg, wd, args.force)
    _say(f"dev set ready: {wd.dev}")


def cmd_build_coarse(cfg, wd, args):
    stage_build_coarse(cfg, wd, args.force)
    _say(f"coarse dataset ready: {wd.coarse_train}")


def cmd_train_coarse(cfg, wd, args):
    stage_train_coarse(cfg, wd, args.force)
    _say(f"coarse model ready: {wd.coarse_ckpt}")


def cmd_build_fine(cfg, wd, args):
    stage_build_fine(cfg, wd, args.force)
    _say(f"fine candidates ready: {wd.fine_samples}")


def cmd_filter(cfg, wd, args):
    stage_filter(cfg, wd, args.force)
    _say(f"refined candidates ready: {wd.refined}")


def cmd_train_fine(cfg, wd, args):
    stage_iterate(cfg, wd, args.force, rounds=0)
    _say(f"fine model ready: {wd.round_ckpt(0)}")


def cmd_iterate(cfg, wd, args):
    stage_iterate(cfg, wd, args.force)
    final = json.loads(wd.history.read_text(encoding="utf-8"))["final_round"]
    _say(f"fine model ready: {wd.round_ckpt(final)}")


def cmd_score(cfg, wd, args):
    stage_score(cfg, wd, args.force)
    _say(f"ranking ready: {wd.ranking}")


def cmd_evaluate(cfg, wd, args):
    stage_evaluate(cfg, wd, args.force)
    _say(f"evaluation ready: {wd.evaluation}")


def cmd_report(cfg, wd, args):
    report = stage_report(cfg, wd, args.force)
    _say(f"report ready: {wd.report_json}")
    _say(f"table ready: {wd.report_csv}")
    for row in report.metrics:
        _say("top %d: precision %.2f per mille, recall %.3f"
             % (row["k"], row["precision_permille"], row["recall"]))


def cmd_pipeline(cfg, wd, args):
    report = run_pipeline(cfg, wd, args.force, corpus=args.corpus,
                          seeds=args.seeds, lexicon=args.lexicon)
    _say(f"report ready: {wd.report_json}")
    for row in report.metrics:
        _say("top %d: precision %.2f per mille, recall %.3f"
             % (row["k"], row["precision_permille"], row["recall"]))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config; defaults to the packaged synthetic "
                             "profile, omitted keys use package defaults")
    common.add_argument("--workdir", type=Path, required=True,
                        help="directory holding all pipeline artifacts")
    common.add_argument("--force", action="store_true",
                        help="recompute even when outputs already exist")
    common.add_argument("--seed-rng", type=int, default=None, dest="seed_rng",
                        help="override the top-level rng seed")

    parser = argparse.ArgumentParser(
        prog="euphdet",
        description="Two-stage impromptu-euphemism detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, helptext, extra=()):
        p = sub.add_parser(name, parents=[common], help=helptext)
        for add_args in extra:
            add_args(p)
        p.set_defaults(func=func)
        return p

    def corpus_args(p, required):
        p.add_argument("--corpus", type=Path, required=required,
                       help="raw text, one sentence per line")
        p.add_argument("--seeds", type=Path, required=required,
                       help="seed terms, one per line")
        p.add_argument("--lexicon", type=Path, default=None,
                       help="known-term lexicon; their sentences are dropped")

    def threads_arg(p):
        p.add_argument("--threads", type=int, default=None,
                       help="embedding worker threads (>1 is non-reproducible)")

    def threshold_arg(p):
        p.add_argument("--threshold", type=float, default=None,
                       help="coarse filter probability cutoff")

    def iterate_args(p):
        p.add_argument("--rounds", type=int, default=None,
                       help="retraining rounds after round 0")
        p.add_argument("--keep-fraction", type=float, default=None,
                       dest="keep_fraction",
                       help="fraction of occurrences kept per round")
        cam_arg(p)

    def cam_arg(p):
        p.add_argument("--no-cam", action="store_true", dest="no_cam",
                       help="disable the context-augmentation loss")

    def k_arg(p):
        p.add_argument("--k", type=int, action="append", default=None,
                       help="ranking cutoff; repeatable")

    add("synth", cmd_synth, "generate the synthetic benchmark corpus")
    add("ingest", cmd_ingest, "tokenize and prepare a raw corpus",
        [lambda p: corpus_args(p, True)])
    add("embed", cmd_embed, "train skip-gram embeddings", [threads_arg])
    add("index", cmd_index, "build the inverted occurrence index")
    add("devset", cmd_devset, "build the labeled dev set")
    add("build-coarse", cmd_build_coarse, "build coarse training data")
    add("train-coarse", cmd_train_coarse, "train the coarse filter")
    add("build-fine", cmd_build_fine, "select and mask fine candidates")
    add("filter", cmd_filter, "apply the coarse filter", [threshold_arg])
    add("train-fine", cmd_train_fine, "train the scorer (no extra rounds)",
        [cam_arg])
    add("iterate", cmd_iterate, "iterative keep-and-retrain training",
        [iterate_args])
    add("score", cmd_score, "rank candidate terms")
    add("evaluate", cmd_evaluate, "score the ranking against gold labels",
        [k_arg])
    add("report", cmd_report, "write report.json, report.csv and figures")
    add("pipeline", cmd_pipeline, "run every stage end to end",
        [lambda p: corpus_args(p, False), threads_arg, threshold_arg,
         iterate_args, k_arg])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config, _collect_overrides(args))
        wd = Workdir(args.workdir)
        args.func(cfg, wd, args)
    except InputError as exc:
        _fail(exc)
        return 2
    except ProviderError as exc:
        _fail(exc)
        return 4
    except InvariantError as exc:
        _fail(exc)
        return 3
    return 0


def _fail(exc: Exception) -> None:
    sys.stderr.write(json.dumps(
        {"error": type(exc).__name__, "message": str(exc)}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
