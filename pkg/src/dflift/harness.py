"""Experiment driver: method x seed grids, policy-value curves, reports.

A benchmark is carved out of one synthetic population: a small slice trains
the logging policy, half the population goes through policy matching to
become confounded observational data, and the remainder provides randomized
train/validation/test splits. Every (method, seed) cell trains a model,
scores it on the held-out randomized test split at each budget, and the
report aggregates means, standard deviations and improvements against a
reference method.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .allocate import BudgetSpec, eom_evaluate, solve_allocation
from .bilevel import TrainConfig, BilevelConfig, train_baseline_tsm, train_bidfcl, train_dfcl
from .data import (
    Dataset,
    DataSource,
    ValidationError,
    concat_datasets,
    load_dataset,
    save_dataset,
    save_outcome_table,
)
from .network import NetworkSpec, forward, save_params
from .synth import (
    GeneratorSpec,
    PolicyModel,
    Population,
    build_obs_via_policy,
    generate_population,
    sample_rct,
)

METHODS = (
    "TSM_SL_RCT",
    "TSM_SL_OBS",
    "TSM_SL_BOTH",
    "DFCL_PPL",
    "DFCL_PIFD",
    "DFCL_DPL",
    "DFCL_DIFD",
    "BIDFCL_PPL",
    "BIDFCL_PIFD",
    "BIDFCL_DPL",
    "BIDFCL_DIFD",
    "BIDFCL_PPL_EXPLICIT",
    "BIDFCL_PIFD_EXPLICIT",
)


@dataclass(frozen=True)
class DataSizes:
    rct_train: int = 2000
    rct_val: int = 2000
    rct_test: int = 20000
    obs: int = 10000
    policy_train: int = 1500
    policy_epochs: int = 30


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorSpec = GeneratorSpec()
    sizes: DataSizes = DataSizes()
    train: TrainConfig = TrainConfig()
    methods: tuple = ("TSM_SL_RCT",)
    budgets: tuple = (0.25,)          # per-capita; budgets[0] drives training
    seeds: tuple = (0,)
    reference: str = "TSM_SL_RCT"
    data_seed: int = 0
    standardize_features: bool = False
    data_paths: dict | None = None    # optional CSV inputs instead of a generator
    out_dir: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("at least one seed required")
        if not self.budgets or any(b <= 0 for b in self.budgets):
            raise ValidationError("budgets must be positive")
        for m in self.methods:
            if m not in METHODS:
                raise ValidationError(f"unknown method {m!r}")


@dataclass
class Benchmark:
    rct_train: Dataset
    rct_val: Dataset
    rct_test: Dataset
    obs: Dataset
    population: Population | None = None
    policy: PolicyModel | None = None
    slices: dict | None = None        # population row indices per split


def make_benchmark(gen: GeneratorSpec, sizes: DataSizes, data_seed: int,
                   policy_budget_per_capita: float = 0.25) -> Benchmark:
    """Disjoint population slices: logging-policy training, policy-matched
    observational pool, and randomized train/validation/test splits."""
    pop = generate_population(gen)
    m = gen.num_treatments
    rng = np.random.default_rng(np.random.SeedSequence((data_seed, 0xBE)))
    perm = rng.permutation(pop.n)

    obs_pool = min(int(sizes.obs * m * 1.5), pop.n)
    need = sizes.policy_train + obs_pool + sizes.rct_train + sizes.rct_val + sizes.rct_test
    if need > pop.n:
        raise ValidationError(
            f"population of {pop.n} too small for the requested splits ({need})"
        )
    cuts = np.cumsum([sizes.policy_train, obs_pool, sizes.rct_train, sizes.rct_val,
                      sizes.rct_test])
    slices = np.split(perm, cuts)[:5]
    policy_idx, obs_idx, train_idx, val_idx, test_idx = slices

    uniform = np.full(m, 1.0 / m)
    policy_rct = sample_rct(pop, uniform, int(rng.integers(2 ** 31)), indices=policy_idx)
    policy_net = NetworkSpec(gen.feature_dim, (32,), m)
    policy_params, _ = train_baseline_tsm(
        policy_rct, policy_net, sizes.policy_epochs, int(rng.integers(2 ** 31)),
        cfg=TrainConfig(lr=1e-2, batch_size=256),
    )
    # the logging policy allocates under the reference budget
    preds = forward(policy_net, policy_params, pop.features[obs_idx])
    lam = solve_allocation(preds, None,
                           BudgetSpec(policy_budget_per_capita * obs_idx.size)).lambda_star
    policy = PolicyModel(policy_net, policy_params, lam)

    obs_full = build_obs_via_policy(pop, policy, 1.0, int(rng.integers(2 ** 31)),
                                    indices=obs_idx)
    if obs_full.n < sizes.obs:
        raise ValidationError(
            f"policy matching kept {obs_full.n} rows, fewer than the requested {sizes.obs}"
        )
    keep = rng.choice(obs_full.n, size=sizes.obs, replace=False)
    obs = obs_full.subset(np.sort(keep))

    return Benchmark(
        rct_train=sample_rct(pop, uniform, int(rng.integers(2 ** 31)), indices=train_idx),
        rct_val=sample_rct(pop, uniform, int(rng.integers(2 ** 31)), indices=val_idx),
        rct_test=sample_rct(pop, uniform, int(rng.integers(2 ** 31)), indices=test_idx),
        obs=obs,
        population=pop,
        policy=policy,
        slices={"policy": policy_idx, "obs_pool": obs_idx, "rct_train": train_idx,
                "rct_val": val_idx, "rct_test": test_idx},
    )


def _standardized(ds: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    return Dataset((ds.features - mean) / std, ds.treatments, ds.revenues, ds.costs,
                   ds.num_treatments, ds.source)


def standardize_benchmark(bench: Benchmark) -> Benchmark:
    """Per-column feature standardization fitted on the training inputs."""
    train_feats = np.concatenate([bench.rct_train.features, bench.obs.features])
    mean = train_feats.mean(axis=0)
    std = np.maximum(train_feats.std(axis=0), 1e-12)
    return Benchmark(
        rct_train=_standardized(bench.rct_train, mean, std),
        rct_val=_standardized(bench.rct_val, mean, std),
        rct_test=_standardized(bench.rct_test, mean, std),
        obs=_standardized(bench.obs, mean, std),
        population=bench.population,
        policy=bench.policy,
    )


def load_benchmark(paths: dict, num_treatments: int | None = None) -> Benchmark:
    return Benchmark(
        rct_train=load_dataset(paths["rct_train"], num_treatments, DataSource.RCT),
        rct_val=load_dataset(paths["rct_val"], num_treatments, DataSource.RCT),
        rct_test=load_dataset(paths["rct_test"], num_treatments, DataSource.RCT),
        obs=load_dataset(paths["obs"], num_treatments, DataSource.OBS),
    )


def resolve_benchmark(cfg: ExperimentConfig) -> Benchmark:
    if cfg.data_paths is not None:
        bench = load_benchmark(cfg.data_paths, cfg.generator.num_treatments)
    else:
        bench = make_benchmark(cfg.generator, cfg.sizes, cfg.data_seed,
                               policy_budget_per_capita=cfg.budgets[0])
    if cfg.standardize_features:
        bench = standardize_benchmark(bench)
    return bench


def train_method(method: str, bench: Benchmark, budget_per_capita: float,
                 cfg: TrainConfig, seed: int):
    """Train one grid cell; returns (network spec, parameters, training log)."""
    rct, obs, val = bench.rct_train, bench.obs, bench.rct_val
    spec = cfg.network_spec(rct.feature_dim, rct.num_treatments)
    budget = BudgetSpec(budget_per_capita * rct.n)
    if method == "TSM_SL_RCT":
        theta, log = train_baseline_tsm(rct, spec, cfg.epochs, seed, cfg, val, budget)
    elif method == "TSM_SL_OBS":
        theta, log = train_baseline_tsm(obs, spec, cfg.epochs, seed, cfg, val,
                                        BudgetSpec(budget_per_capita * obs.n))
    elif method == "TSM_SL_BOTH":
        both = concat_datasets([rct, obs], source=DataSource.OBS)
        theta, log = train_baseline_tsm(both, spec, cfg.epochs, seed, cfg, val,
                                        BudgetSpec(budget_per_capita * both.n))
    elif method.startswith("DFCL_"):
        theta, log = train_dfcl(rct, budget, cfg, seed, rct_val=val,
                                surrogate=method.removeprefix("DFCL_"))
    elif method.startswith("BIDFCL_"):
        tail = method.removeprefix("BIDFCL_")
        diff_mode = "implicit"
        if tail.endswith("_EXPLICIT"):
            diff_mode = "explicit"
            tail = tail.removesuffix("_EXPLICIT")
        bcfg = replace(cfg, bilevel=replace(cfg.bilevel, surrogate=tail,
                                            diff_mode=diff_mode))
        state, log = train_bidfcl(obs, rct, budget, bcfg, seed, rct_val=val)
        theta = state.theta
    else:
        raise ValidationError(f"unknown method {method!r}")
    return spec, theta, log


def budget_sweep(spec: NetworkSpec, params: np.ndarray, rct: Dataset,
                 budgets_per_capita, epsilon: float = 1e-4):
    """Policy-value curve: one point (budget, revenue, cost, lambda) per
    budget, each identical to a direct single-budget evaluation."""
    preds = forward(spec, params, rct.features)
    out = []
    for b in budgets_per_capita:
        r_bar, c_bar, lam = eom_evaluate(preds, rct, BudgetSpec(b * rct.n, epsilon))
        out.append({"budget": float(b), "revenue": r_bar, "cost": c_bar, "lambda": lam})
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(
        json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


@dataclass
class MetricsReport:
    config_hash: str
    reference: str
    budgets: list
    cells: dict = field(default_factory=dict)     # method -> seed -> record
    summary: dict = field(default_factory=dict)   # method -> budget -> stats
    failures: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "reference": self.reference,
            "budgets": self.budgets,
            "cells": self.cells,
            "summary": self.summary,
            "failures": self.failures,
            "wall_time": self.wall_time,
        }

    def eom_values(self, method: str, budget: float) -> np.ndarray:
        key = _budget_key(budget)
        return np.array([
            rec["eom"][key]["revenue"] for rec in self.cells[method].values()
            if rec["status"] == "ok"
        ])


def _budget_key(b: float) -> str:
    return f"{float(b):.10g}"


def summarize(report: MetricsReport):
    ref = report.reference
    for method, seeds in report.cells.items():
        report.summary[method] = {}
        for b in report.budgets:
            values = report.eom_values(method, b)
            if values.size == 0:
                report.summary[method][_budget_key(b)] = {"mean": None, "std": None,
                                                          "improvement": None}
                continue
            entry = {"mean": float(values.mean()),
                     "std": float(values.std(ddof=1)) if values.size > 1 else 0.0}
            report.summary[method][_budget_key(b)] = entry
    if ref in report.summary:
        for method in report.summary:
            for key, entry in report.summary[method].items():
                ref_mean = report.summary[ref][key]["mean"]
                if entry["mean"] is not None and ref_mean:
                    entry["improvement"] = entry["mean"] / ref_mean - 1.0
                else:
                    entry["improvement"] = None
    return report


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    """Train every (method, seed) cell and evaluate policy value on the
    held-out randomized test split at each budget."""
    start = time.perf_counter()
    bench = resolve_benchmark(cfg)
    report = MetricsReport(config_hash=config_hash(cfg), reference=cfg.reference,
                           budgets=[float(b) for b in cfg.budgets])
    for method in cfg.methods:
        report.cells[method] = {}
        for seed in cfg.seeds:
            cell_start = time.perf_counter()
            try:
                spec, theta, log = train_method(method, bench, cfg.budgets[0],
                                                cfg.train, seed)
                curve = budget_sweep(spec, theta, bench.rct_test, cfg.budgets)
                record = {
                    "status": "ok",
                    "eom": {_budget_key(p["budget"]): {"revenue": p["revenue"],
                                                       "cost": p["cost"],
                                                       "lambda": p["lambda"]}
                            for p in curve},
                    "best_epoch": log.best_epoch,
                    "wall_time": time.perf_counter() - cell_start,
                }
                if cfg.out_dir is not None:
                    save_params(f"{cfg.out_dir}/{method}_seed{seed}.ckpt", spec, theta)
            except Exception as e:  # a failed cell must not sink the grid
                record = {"status": "failed", "error": f"{type(e).__name__}: {e}",
                          "eom": {}, "wall_time": time.perf_counter() - cell_start}
                report.failures.append({"method": method, "seed": seed,
                                        "error": record["error"]})
            report.cells[method][str(seed)] = record
    summarize(report)
    report.wall_time = time.perf_counter() - start
    if cfg.out_dir is not None:
        write_report(report, cfg.out_dir)
    return report


def write_report(report: MetricsReport, out_dir):
    with open(f"{out_dir}/report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(f"{out_dir}/curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "seed", "budget", "revenue", "cost", "lambda"])
        for method, seeds in report.cells.items():
            for seed, rec in seeds.items():
                for key, point in rec.get("eom", {}).items():
                    w.writerow([method, seed, key, repr(point["revenue"]),
                                repr(point["cost"]), repr(point["lambda"])])


def write_benchmark(bench: Benchmark, out_dir):
    """Dataset CSVs plus ground-truth outcome sidecars for synthetic data."""
    names = {"rct_train": bench.rct_train, "rct_val": bench.rct_val,
             "rct_test": bench.rct_test, "obs": bench.obs}
    for name, ds in names.items():
        save_dataset(ds, f"{out_dir}/{name}.csv")
    if bench.population is not None:
        save_outcome_table(bench.population.table, f"{out_dir}/population_outcomes.csv")


DEFAULT_SWEEP_BUDGETS = tuple(np.round(np.linspace(0.08, 0.62, 10), 4))


def default_experiment_config(methods=("TSM_SL_RCT", "BIDFCL_PPL"), seeds=(0,),
                              budgets=(0.25,), **overrides) -> ExperimentConfig:
    """The calibrated synthetic benchmark preset.

    A capacity-limited network on a population whose base revenue is rough
    (hard to regress, irrelevant to allocation) and whose treatment effects
    are modest; observational data carries five times the experimental volume
    but is policy-confounded.
    """
    train = TrainConfig(
        hidden_layers=(16,),
        epochs=60,
        batch_size=256,
        lr=3e-3,
        tau=1.0,
        alpha=3.0,
        teacher_epochs=60,
        bilevel=BilevelConfig(lr_theta=3e-3, lr_phi=3e-3, warm_start_epochs=10),
    )
    cfg = ExperimentConfig(
        generator=GeneratorSpec(),
        sizes=DataSizes(rct_train=2000, rct_val=10000, rct_test=20000, obs=10000,
                        policy_train=1500),
        train=train,
        methods=tuple(methods),
        budgets=tuple(budgets),
        seeds=tuple(seeds),
    )
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# config (de)serialization for the CLI
# ---------------------------------------------------------------------------


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {f.name: plain(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, (tuple, list)):
            return [plain(v) for v in obj]
        if isinstance(obj, np.generic):
            return obj.item()
        return obj

    return plain(cfg)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    gen = GeneratorSpec(**raw.pop("generator", {}))
    sizes = DataSizes(**raw.pop("sizes", {}))
    train_raw = dict(raw.pop("train", {}))
    bilevel = BilevelConfig(**train_raw.pop("bilevel", {}))
    hidden = train_raw.pop("hidden_layers", None)
    train = TrainConfig(bilevel=bilevel,
                        **({"hidden_layers": tuple(hidden)} if hidden is not None else {}),
                        **train_raw)
    for key in ("methods", "budgets", "seeds"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return ExperimentConfig(generator=gen, sizes=sizes, train=train, **raw)
