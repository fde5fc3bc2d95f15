"""Command-line entry point.

Subcommands: train-prior, train, stylize, eval, bench, ablate. Exit codes:
0 success, 1 usage error, 2 runtime failure. Every subcommand accepts
--seed and prints a single JSON status line on success.
"""

import argparse
import json
import os
import sys

import torch

from . import ablate as ablate_mod
from .config import cache_dir, desk_preset, load_config
from .data import load_image, save_image
from .errors import SpastError
from .eval_metrics import benchmark_inference, evaluate
from .trainer import init_state, load_checkpoint, stylize, train, train_prior


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _status(command: str, **payload) -> None:
    print(json.dumps({"status": "ok", "command": command, **payload}))


def _resolve_config(args):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "preset", None) == "desk":
        workdir = args.workdir or os.path.join(cache_dir(), "desk")
        os.makedirs(workdir, exist_ok=True)
        cfg = desk_preset(workdir)
    else:
        raise SpastError("either --config or --preset desk is required")
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "iterations", None):
        cfg.iterations = args.iterations
    return cfg


def _state_for_inference(args):
    if args.ckpt:
        if not os.path.exists(args.ckpt):
            raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
        return load_checkpoint(args.ckpt)
    from .config import TrainConfig

    cfg = TrainConfig(seed=args.seed if args.seed is not None else 0)
    if getattr(args, "b", None):
        cfg.b = args.b
    return init_state(cfg)


def build_parser() -> _Parser:
    parser = _Parser(prog="spast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        if config:
            p.add_argument("--config", default=None, help="key=value config file")
            p.add_argument("--preset", choices=["desk"], default=None)
            p.add_argument("--workdir", default=None, help="directory for preset corpora/outputs")

    p = sub.add_parser("train-prior", help="stage one: train the toy diffusion style prior")
    add_common(p)
    p.add_argument("--out", default=None, help="prior checkpoint path (default: config prior.ckpt)")

    p = sub.add_parser("train", help="stage two: train the stylization model")
    add_common(p)
    p.add_argument("--iterations", type=int, default=None, help="override config iterations")
    p.add_argument("--resume", default=None, help="resume from a checkpoint")

    p = sub.add_parser("stylize", help="stylize one content image with one style image")
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--b", type=int, default=None, help="regions per side (fresh-state runs)")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="metrics over a content x style directory cross product")
    p.add_argument("--content-dir", required=True)
    p.add_argument("--style-dir", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-json", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("bench", help="inference-time benchmark")
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("ablate", help="retrain preset variants and tabulate metrics")
    add_common(p)
    p.add_argument("--term", choices=list(ablate_mod.TERMS), default=None)
    p.add_argument("--all", action="store_true", help="run all five component ablations")
    p.add_argument("--timestep", default=None, help="comma-separated prior timesteps to sweep")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="config override variant (repeatable)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds for the full model")
    p.add_argument("--steps", type=int, default=None, help="per-run iteration budget")
    p.add_argument("--out", default=None, help="write the metric table JSON here")
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _dispatch(args)
    except (SpastError, FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    command = args.command
    if command == "train-prior":
        cfg = _resolve_config(args)
        if args.out:
            cfg.prior.ckpt = args.out
        prior, history = train_prior(cfg)
        _status(
            command,
            ckpt=cfg.prior.ckpt,
            steps=len(history),
            final_loss=history[-1],
            run_id=prior.run_id,
        )
    elif command == "train":
        cfg = _resolve_config(args)
        reports = train(cfg, resume=args.resume)
        _status(
            command,
            ckpt=os.path.join(cfg.out_dir, "checkpoint.spast") if cfg.out_dir else None,
            log=os.path.join(cfg.out_dir, "losses.jsonl") if cfg.out_dir else None,
            steps=reports[-1].step if reports else 0,
            final_total=reports[-1].total if reports else None,
        )
    elif command == "stylize":
        state = _state_for_inference(args)
        content = load_image(args.content)
        style = load_image(args.style)
        with torch.no_grad():
            out = stylize(state, content, style)
        save_image(out, args.out)
        _status(command, out=args.out, width=out.shape[2], height=out.shape[1])
    elif command == "eval":
        state = _state_for_inference(args)

        def stylize_fn(content, style):
            return stylize(state, content, style)

        report = evaluate(stylize_fn, state.encoder, args.content_dir, args.style_dir)
        if args.out_csv:
            report.write_csv(args.out_csv)
        if args.out_json:
            report.write_json(args.out_json)
        _status(command, pairs=len(report.records), **{k: report.aggregates[k] for k in report.aggregates})
    elif command == "bench":
        state = _state_for_inference(args)

        def stylize_fn(content, style):
            return stylize(state, content, style)

        stats = benchmark_inference(stylize_fn, resolution=args.resolution, trials=args.trials)
        _status(command, **{k: v for k, v in stats.items() if k != "samples"})
    elif command == "ablate":
        cfg = _resolve_config(args)
        workdir = args.workdir or os.path.join(cache_dir(), "ablate")
        os.makedirs(workdir, exist_ok=True)
        terms = ablate_mod.TERMS if args.all else ((args.term,) if args.term else ())
        seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (cfg.seed,)
        timesteps = tuple(int(t) for t in args.timestep.split(",")) if args.timestep else ()
        rows = ablate_mod.ablate(
            cfg,
            workdir,
            terms=terms,
            seeds=seeds,
            steps=args.steps,
            timesteps=timesteps,
            overrides=tuple(args.overrides),
            quiet=False,
        )
        print(ablate_mod.format_table(rows), file=sys.stderr)
        if args.out:
            ablate_mod.write_table(rows, args.out)
        _status(command, rows=len(rows), out=args.out, variants=[r["variant"] for r in rows])
    else:  # pragma: no cover - argparse enforces the choices
        raise SpastError(f"unknown command {command!r}")
    return 0


def main() -> None:
    raise SystemExit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
