"""Command-line entry points.

Every subcommand reads one TOML or JSON config file describing the generator,
data sizes, training settings and the experiment grid; ``--seed`` and
``--out`` override the corresponding config fields.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .allocate import BudgetSpec, eom_evaluate
from .data import DataSource, load_dataset
from .harness import (
    ExperimentConfig,
    budget_sweep,
    config_from_dict,
    resolve_benchmark,
    run_experiment,
    train_method,
    write_benchmark,
)
from .network import forward, load_params, save_params


def load_config(path: str) -> ExperimentConfig:
    if path.endswith(".toml"):
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    else:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    return config_from_dict(raw)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    from dataclasses import replace

    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def cmd_generate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = cfg.out_dir or "."
    os.makedirs(out, exist_ok=True)
    bench = resolve_benchmark(cfg)
    write_benchmark(bench, out)
    print(f"wrote benchmark CSVs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = cfg.out_dir or "."
    os.makedirs(out, exist_ok=True)
    bench = resolve_benchmark(cfg)
    seed = cfg.seeds[0]
    spec, theta, log = train_method(args.method, bench, cfg.budgets[0], cfg.train, seed)
    ckpt = f"{out}/{args.method}_seed{seed}.ckpt"
    save_params(ckpt, spec, theta)
    with open(f"{out}/{args.method}_seed{seed}_log.json", "w", encoding="utf-8") as fh:
        json.dump(log.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {ckpt}")
    return 0


def _load_eval_data(cfg: ExperimentConfig, args):
    if getattr(args, "data", None):
        return load_dataset(args.data, cfg.generator.num_treatments, DataSource.RCT)
    return resolve_benchmark(cfg).rct_test


def cmd_evaluate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    spec, params = load_params(args.checkpoint)
    rct = _load_eval_data(cfg, args)
    preds = forward(spec, params, rct.features)
    results = []
    for b in cfg.budgets:
        r_bar, c_bar, lam = eom_evaluate(preds, rct, BudgetSpec(b * rct.n))
        results.append({"budget": float(b), "revenue": r_bar, "cost": c_bar,
                        "lambda": lam})
    payload = json.dumps({"checkpoint": args.checkpoint, "results": results},
                         indent=2, sort_keys=True)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(f"{cfg.out_dir}/evaluate.json", "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    print(payload)
    return 0


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    spec, params = load_params(args.checkpoint)
    rct = _load_eval_data(cfg, args)
    curve = budget_sweep(spec, params, rct, cfg.budgets)
    out = cfg.out_dir or "."
    os.makedirs(out, exist_ok=True)
    path = f"{out}/sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["budget", "revenue", "cost", "lambda"])
        for p in curve:
            w.writerow([p["budget"], repr(p["revenue"]), repr(p["cost"]),
                        repr(p["lambda"])])
    print(f"wrote {path}")
    return 0


def cmd_experiment(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
    report = run_experiment(cfg)
    for method, per_budget in sorted(report.summary.items()):
        for key, entry in sorted(per_budget.items()):
            mean = entry.get("mean")
            imp = entry.get("improvement")
            mean_s = "failed" if mean is None else f"{mean:.4f}"
            imp_s = "" if imp is None else f" ({imp:+.2%} vs {report.reference})"
            print(f"{method:24s} budget={key}: EOM {mean_s}{imp_s}")
    if report.failures:
        for failure in report.failures:
            print(f"FAILED {failure['method']} seed={failure['seed']}: "
                  f"{failure['error']}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dflift",
        description="decision-focused uplift modeling for budgeted treatment allocation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, method=False, data=False):
        p.add_argument("--config", required=True, help="TOML or JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed list")
        p.add_argument("--out", default=None, help="override the output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if method:
            p.add_argument("--method", required=True)
        if data:
            p.add_argument("--data", default=None, help="evaluation RCT CSV")

    common(sub.add_parser("generate", help="write benchmark CSVs"))
    common(sub.add_parser("train", help="train one method"), method=True)
    common(sub.add_parser("evaluate", help="policy value of a checkpoint"),
           checkpoint=True, data=True)
    common(sub.add_parser("sweep", help="policy-value curve over budgets"),
           checkpoint=True, data=True)
    common(sub.add_parser("experiment", help="full method x seed grid"))
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
