"""Synthetic marketing populations with known potential-outcome surfaces.

The generator draws a feature matrix and deterministic revenue/cost surfaces
over all (individual, treatment) pairs, so every estimator in the package can
be checked against ground truth. Experimental datasets are sampled by pure
randomization; observational datasets are built by simulating a marketing
policy and keeping only the individuals whose random assignment agrees with
it, which confounds treatment with features by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .allocate import dual_assignment
from .data import Dataset, DataSource, FullOutcomeTable, ValidationError
from .network import NetworkSpec, forward

FAMILIES = ("linear", "logistic", "piecewise")
UPLIFT_SCALE = 0.6


@dataclass(frozen=True)
class GeneratorSpec:
    feature_dim: int = 10
    num_treatments: int = 4
    population_size: int = 200_000
    family: str = "piecewise"
    noise_std: float = 0.3      # additive Gaussian noise on observed revenue
    cost_noise: float = 0.05    # log-normal sigma on observed cost (mean one)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"family must be one of {FAMILIES}")
        if self.feature_dim < 1 or self.num_treatments < 1 or self.population_size < 1:
            raise ValidationError("dimensions must be >= 1")
        if self.noise_std < 0 or self.cost_noise < 0:
            raise ValidationError("noise levels must be >= 0")


@dataclass(frozen=True)
class Population:
    features: np.ndarray
    table: FullOutcomeTable
    spec: GeneratorSpec

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class PolicyModel:
    """A trained prediction network plus the multiplier its greedy rule uses."""

    spec: NetworkSpec
    params: np.ndarray
    lam: float = 0.0

    def choose(self, features: np.ndarray) -> np.ndarray:
        preds = forward(self.spec, self.params, features)
        return np.argmax(dual_assignment(preds, self.lam), axis=1)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _surfaces(spec: GeneratorSpec, features: np.ndarray):
    """Deterministic revenue/cost tables for the given features."""
    d, m = spec.feature_dim, spec.num_treatments
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xD1F)))
    w_base = rng.normal(size=d) / np.sqrt(d)
    w_rough = rng.normal(size=d) / np.sqrt(d)
    w_resp = rng.normal(size=d) / np.sqrt(d)
    w_curve = rng.normal(size=d) / np.sqrt(d)
    w_cost = rng.normal(size=d) / np.sqrt(d)

    # the base revenue is treatment-independent and carries a rough
    # oscillatory part: it dominates squared error yet cancels in every
    # within-individual treatment comparison
    base = (2.5 + 0.9 * np.tanh(features @ w_base)
            + 0.9 * np.sin(5.0 * (features @ w_rough)))
    resp = _sigmoid(2.0 * (features @ w_resp))               # responsiveness
    levels = (np.arange(m) / max(m - 1, 1))[None, :]         # 0 .. 1

    if spec.family == "linear":
        dose = np.broadcast_to(levels, (features.shape[0], m))
    elif spec.family == "logistic":
        mid = 0.5 + 0.3 * np.tanh(features @ w_curve)
        dose = _sigmoid(6.0 * (levels - mid[:, None]))
        dose = dose - dose[:, :1]                            # zero at control
        peak = np.maximum(dose[:, -1:], 1e-12)
        dose = dose / peak
    else:  # piecewise: linear rise to a heterogeneous saturation point
        brk = 0.3 + 0.7 * _sigmoid(2.0 * (features @ w_curve))
        dose = np.minimum(levels, brk[:, None]) / brk[:, None]

    revenues = base[:, None] + UPLIFT_SCALE * resp[:, None] * dose
    slope = 0.6 + 0.4 * _sigmoid(features @ w_cost)
    costs = 0.05 + slope[:, None] * np.broadcast_to(levels, revenues.shape)
    return revenues, costs


def generate_population(spec: GeneratorSpec) -> Population:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xFEA)))
    features = rng.normal(size=(spec.population_size, spec.feature_dim))
    revenues, costs = _surfaces(spec, features)
    return Population(features, FullOutcomeTable(revenues, costs), spec)


def _observe(pop: Population, idx: np.ndarray, treatments: np.ndarray, rng):
    """Factual labels: table entries plus the recorded noise draws.

    Revenue noise is additive Gaussian (then floored at zero); cost noise is a
    mean-one log-normal factor so costs stay positive and unbiased.
    """
    spec = pop.spec
    rows = np.arange(idx.size)
    r_true = pop.table.revenues[idx, :][rows, treatments]
    c_true = pop.table.costs[idx, :][rows, treatments]
    r_noise = rng.normal(0.0, spec.noise_std, idx.size) if spec.noise_std > 0 else np.zeros(idx.size)
    if spec.cost_noise > 0:
        c_factor = np.exp(rng.normal(0.0, spec.cost_noise, idx.size)
                          - 0.5 * spec.cost_noise ** 2)
    else:
        c_factor = np.ones(idx.size)
    revenue = np.maximum(r_true + r_noise, 0.0)
    cost = c_true * c_factor
    return revenue, cost, r_noise, c_factor


def sample_rct(pop: Population, probs, seed: int, indices=None, return_noise=False):
    """Randomized experiment over (a slice of) the population.

    Treatments are drawn independently of features from ``probs``; factual
    labels come from the outcome table plus observation noise.
    """
    probs = np.asarray(probs, dtype=np.float64)
    m = pop.spec.num_treatments
    if probs.shape != (m,):
        raise ValidationError(f"probs must have length {m}")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValidationError("assignment probabilities must sum to 1")
    if np.any(probs <= 0):
        raise ValidationError("every arm needs positive assignment probability")
    idx = np.arange(pop.n) if indices is None else np.asarray(indices)
    rng = np.random.default_rng(seed)
    treatments = rng.choice(m, size=idx.size, p=probs)
    revenue, cost, r_noise, c_factor = _observe(pop, idx, treatments, rng)
    ds = Dataset(pop.features[idx], treatments, revenue, cost, m, DataSource.RCT)
    if return_noise:
        return ds, r_noise, c_factor
    return ds


def build_obs_via_policy(pop: Population, policy: PolicyModel, match_fraction: float,
                         seed: int, indices=None) -> Dataset:
    """Confounded observational data by policy matching.

    Draws a fresh uniform random assignment over a population slice and keeps
    only the individuals whose draw equals the policy's greedy choice, so the
    kept treatments are a deterministic function of features.
    """
    if not 0 < match_fraction <= 1:
        raise ValidationError("match_fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    if indices is None:
        size = int(round(match_fraction * pop.n))
        indices = rng.choice(pop.n, size=size, replace=False)
    else:
        indices = np.asarray(indices)
    m = pop.spec.num_treatments
    assigned = rng.integers(0, m, indices.size)
    chosen = policy.choose(pop.features[indices])
    keep = assigned == chosen
    if not np.any(keep):
        raise ValidationError("policy degenerate: no assignments matched")
    idx = indices[keep]
    revenue, cost, _, _ = _observe(pop, idx, assigned[keep], rng)
    return Dataset(pop.features[idx], assigned[keep], revenue, cost, m, DataSource.OBS)


def treatment_feature_dependence(ds: Dataset, column: int = 0) -> float:
    """Chi-square statistic between a median-thresholded feature and the
    treatment; near zero for randomized data, large under confounding."""
    flag = ds.features[:, column] > np.median(ds.features[:, column])
    m = ds.num_treatments
    table = np.zeros((2, m))
    for row in (0, 1):
        table[row] = np.bincount(ds.treatments[flag == bool(row)], minlength=m)
    expected = table.sum(axis=1, keepdims=True) * table.sum(axis=0) / max(ds.n, 1)
    mask = expected > 0
    return float(np.sum((table[mask] - expected[mask]) ** 2 / expected[mask]))


def subset_population(pop: Population, idx) -> Population:
    idx = np.asarray(idx)
    return Population(pop.features[idx],
                      FullOutcomeTable(pop.table.revenues[idx], pop.table.costs[idx]),
                      pop.spec)
