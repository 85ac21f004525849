"""Command line entry point: ``nina {train,sample,eval,bench,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import taskgen
from .bench import MIN_TRIALS, MIN_WARMUP, bench_latency, format_table, linear_fit_r2, ratio_table, write_csv
from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .diffusion import DdpmDecoder
from .experiment import (ABLATION_GRID, ablate, evaluate, make_data, noise_summary, save_run,
                         train_model, write_sweep_csv)
from .training import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "no_plu", False):
        overrides.append("no_plu=true")
    if getattr(args, "no_noise", False):
        overrides.append("no_noise=true")
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("", overrides)


def _load(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, doc = load_checkpoint(path)
    try:
        cfg = RunConfig(**doc["run_config"]).validate()
    except TypeError as err:
        raise ConfigError(f"checkpoint run config is invalid: {err}") from None
    return model, cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    model, record, _, held = train_model(cfg)
    metrics = evaluate(model, cfg, held)
    for name, value in metrics.items():
        record.log(record.events[-1]["step"] if record.events else 0, f"final_{name}", value)
    out = save_run(args.out or cfg.output_dir, model, record, cfg)
    print(json.dumps({"output_dir": str(out), **metrics}, indent=2))
    return EXIT_OK


def cmd_sample(args) -> int:
    model, cfg = _load(args.checkpoint)
    spec = taskgen.get_task(cfg.task)
    if not 0 <= args.context_id < spec.n_contexts:
        raise ConfigError(f"context id must be in [0, {spec.n_contexts})")
    h = spec.context_embedding(args.context_id)
    actions = model.sample(h, np.random.default_rng(args.seed), count=args.count)
    contexts = np.repeat(h[None], args.count, axis=0)
    data = taskgen.TaskDataset(spec, contexts, actions, np.full(args.count, -1),
                               np.full(args.count, args.context_id), args.seed)
    taskgen.write_dataset(args.out, data)
    rate = taskgen.success_rate(actions, h, spec, cfg.radius)
    print(json.dumps({"samples": args.count, "out": args.out, "success_rate": rate}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = _load(args.checkpoint)
    _, held = make_data(cfg)
    metrics = evaluate(model, cfg, held)
    out = Path(args.checkpoint).with_name("eval.json")
    out.write_text(json.dumps({"run_config": cfg.to_dict(), **metrics}, indent=2))
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.trials < MIN_TRIALS or args.warmup < MIN_WARMUP:
        raise ConfigError(f"bench needs >= {MIN_TRIALS} trials and >= {MIN_WARMUP} warmup samples")
    steps = [int(s) for s in args.ddpm_steps.split(",")] if args.ddpm_steps else []
    models = []
    h = None
    for path in args.checkpoint:
        model, cfg = _load(path)
        spec = taskgen.get_task(cfg.task)
        h = spec.context_embedding(0) if h is None else h
        if isinstance(model, DdpmDecoder):
            for t in steps or [model.steps]:
                variant = DdpmDecoder(replace(model.config, steps=t))
                for (_, dst), (_, src) in zip(variant.named_parameters(), model.named_parameters()):
                    dst.data[...] = src.data
                models.append((f"ddpm-T{t}", variant))
        else:
            models.append((f"{cfg.model}-K{cfg.depth}", model))
    results = bench_latency(models, h, trials=args.trials, warmup=args.warmup)
    print(format_table(results))
    ddpm = [(int(r.model_id.split("-T")[1]), r.p50) for r in results if r.model_id.startswith("ddpm")]
    if len(ddpm) >= 3:
        print(f"ddpm median time vs T: R^2 = {linear_fit_r2(*zip(*ddpm)):.4f}")
    if args.csv:
        write_csv(args.csv, results)
    if args.json:
        Path(args.json).write_text(json.dumps({"results": [r.row() for r in results],
                                               "ratios": ratio_table(results)}, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    axes = args.axis or list(ABLATION_GRID)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for axis in axes:
        values = [float(v) for v in args.values.split(",")] if args.values else None
        rows += ablate(cfg, axis, values, seeds)
    out = Path(args.csv or Path(cfg.output_dir) / "ablate.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out, rows, cfg)
    if "noise" in axes:
        print(json.dumps(noise_summary([r for r in rows if r["axis"] == "noise"])))
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nina", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key: type = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
        p.add_argument("--no-plu", action="store_true", help="drop every PLU layer")
        p.add_argument("--no-noise", action="store_true", help="train without action noise")
        return p

    p = with_config(sub.add_parser("train", help="train a model and write checkpoint + run record"))
    p.add_argument("--out", help="output directory (default: output_dir from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw action chunks from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context-id", type=int, default=0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset-format output file")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="held-out NLL, NLL gap and success rate")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-sample latency of one or more checkpoints")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--ddpm-steps", default="", help="comma list of T values for ddpm checkpoints")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--csv")
    p.add_argument("--json")
    p.set_defaults(func=cmd_bench)

    p = with_config(sub.add_parser("ablate", help="sweep depth / hidden / noise"))
    p.add_argument("--axis", action="append", choices=sorted(ABLATION_GRID))
    p.add_argument("--values", help="comma list overriding the default grid")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
