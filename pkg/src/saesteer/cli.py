"""Command-line entry point: one subcommand per pipeline stage plus ``run``."""

from __future__ import annotations

import argparse
import logging
import sys

from filelock import FileLock, Timeout
from pydantic import ValidationError

from saesteer import pipeline, probe
from saesteer.config import load_config
from saesteer.io import FormatError


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (required unless set in the config)")
    common.add_argument("--workdir", help="output directory")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="single-threaded, byte-reproducible outputs (default on)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="saesteer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="sample the synthetic corpus")
    sub.add_parser("train-lm", parents=[common], help="train the host language model")
    s = sub.add_parser("dump-acts", parents=[common], help="dump hidden states at a layer")
    s.add_argument("--layer", type=int, required=True)
    s = sub.add_parser("train-sae", parents=[common], help="train one configured SAE")
    s.add_argument("--variant", choices=("topk", "ordered"), required=True)
    s.add_argument("--layer", type=int, required=True)
    s = sub.add_parser("probe", parents=[common], help="fit a linear probe")
    s.add_argument("--concept", choices=sorted(probe.CONCEPTS), required=True)
    s.add_argument("--level", choices=("residue", "sequence"))
    s.add_argument("--source", choices=("latents", "neurons"), default="latents")
    s.add_argument("--variant", choices=("topk", "ordered"), default="ordered")
    s.add_argument("--layer", type=int, default=1)
    s = sub.add_parser("select", parents=[common], help="threshold-F1 feature selection")
    s.add_argument("--concept", choices=sorted(probe.CONCEPTS), required=True)
    s.add_argument("--variant", choices=("topk", "ordered"), default="ordered")
    s.add_argument("--layer", type=int, default=1)
    s = sub.add_parser("steer", parents=[common], help="steering sweep")
    s.add_argument("--index", type=int, default=0, help="which configured steering entry to run")
    s.add_argument("--latent", type=int, help="override the entry's latent")
    s.add_argument("--layer", type=int, help="override the entry's layer")
    sub.add_parser("report", parents=[common], help="consolidated tables")
    sub.add_parser("run", parents=[common], help="every stage in order")
    return p


def _dispatch(args, ctx: pipeline.Context):
    cmd = args.command
    if cmd == "gen-corpus":
        return pipeline.cmd_gen_corpus(ctx)
    if cmd == "train-lm":
        return pipeline.cmd_train_lm(ctx)
    if cmd == "dump-acts":
        return pipeline.cmd_dump_acts(ctx, args.layer)
    if cmd == "train-sae":
        ctx.check_layer(args.layer)
        return pipeline.cmd_train_sae(ctx, args.variant, args.layer)
    if cmd == "probe":
        ctx.check_layer(args.layer)
        level = args.level or probe.CONCEPTS[args.concept]
        variant = args.variant if args.source == "latents" else None
        return pipeline.cmd_probe(ctx, args.concept, level, variant, args.layer)
    if cmd == "select":
        ctx.check_layer(args.layer)
        return pipeline.cmd_select(ctx, args.concept, args.variant, args.layer)
    if cmd == "steer":
        entries = ctx.config.steering
        if not 0 <= args.index < len(entries):
            raise ValueError(f"steering index {args.index} outside 0..{len(entries) - 1}")
        entry = entries[args.index]
        if args.layer is not None:
            entry = entry.model_copy(update={"layer": args.layer})
        return pipeline.cmd_steer(ctx, entry, args.latent)
    if cmd == "report":
        return pipeline.cmd_report(ctx)
    return pipeline.cmd_run(ctx)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        config = load_config(args.config, seed=args.seed, workdir=args.workdir, deterministic=args.deterministic)
    except (ValidationError, FileNotFoundError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    ctx = pipeline.Context.create(config)
    pipeline.configure_torch(config.deterministic)
    ctx.layout.root.mkdir(parents=True, exist_ok=True)
    try:
        with FileLock(ctx.layout.lock, timeout=0):
            _dispatch(args, ctx)
    except Timeout:
        print(f"error: workdir {ctx.layout.root} is locked by another run", file=sys.stderr)
        return 3
    except (FileNotFoundError, FormatError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
