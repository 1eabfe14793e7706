"""Budget-constrained treatment allocation.

The primal problem assigns exactly one of M treatments to each of N
individuals, maximizing total predicted revenue subject to a global budget
on total cost. Dualizing the budget with a multiplier ``lambda`` decomposes
the assignment per individual into an argmax of ``r_hat - lambda * c_hat``;
the multiplier is found by bisection on the realized per-capita cost.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import COST_FLOOR, Dataset, DataSource, PredictionMatrix, ValidationError

BRUTE_FORCE_LIMIT = 10_000_000


@dataclass(frozen=True)
class BudgetSpec:
    """Total budget plus the bisection tolerance and iteration cap."""

    total_budget: float
    epsilon: float = 1e-4
    max_iters: int = 60

    def __post_init__(self):
        if self.total_budget < 0:
            raise ValidationError("total_budget must be >= 0")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")


@dataclass
class AllocationSolution:
    assignment: np.ndarray            # N x M one-hot rows
    lambda_star: float
    estimated_per_capita_cost: float
    estimated_per_capita_revenue: float
    iterations: int = 0
    converged: bool = True            # False when max_iters ran out first

    @property
    def chosen(self) -> np.ndarray:
        return np.argmax(self.assignment, axis=1)


def floored_costs(costs: np.ndarray) -> np.ndarray:
    return np.maximum(costs, COST_FLOOR)


def dual_assignment(preds: PredictionMatrix, lam: float) -> np.ndarray:
    """One-hot assignment maximizing ``r_hat - lam * c_hat`` per row.

    Ties go to the lowest treatment index.
    """
    scores = preds.revenues - lam * floored_costs(preds.costs)
    chosen = np.argmax(scores, axis=1)
    z = np.zeros(scores.shape, dtype=np.float64)
    z[np.arange(scores.shape[0]), chosen] = 1.0
    return z


def ipw_outcome_means(chosen: np.ndarray, data: Dataset):
    """Inverse-propensity per-capita (revenue, cost) of the policy ``chosen``.

    Each sample contributes its factual outcome, reweighted by 1/p_t, only
    when the policy picks the treatment it actually received. Weights only
    involve arms that occur, so empty arms never divide by zero here; the
    estimators that are biased without full support check it themselves.
    """
    t = data.treatments
    match = (chosen == t).astype(np.float64)
    w = match / data.propensities[t]
    n = data.n
    return float(np.sum(w * data.revenues) / n), float(np.sum(w * data.costs) / n)


def _predicted_means(z: np.ndarray, preds: PredictionMatrix):
    n = z.shape[0]
    r = float(np.sum(z * preds.revenues) / n)
    c = float(np.sum(z * floored_costs(preds.costs)) / n)
    return r, c


def _bisect_lambda(preds: PredictionMatrix, budget: BudgetSpec, data: Dataset | None):
    """Shared bisection; per-capita cost comes from inverse-propensity
    factual outcomes when ``data`` is given, from predictions otherwise."""
    n = preds.shape[0]
    target = budget.total_budget / n
    eps = budget.epsilon

    def evaluate(lam):
        z = dual_assignment(preds, lam)
        if data is not None:
            r_bar, c_bar = ipw_outcome_means(np.argmax(z, axis=1), data)
        else:
            r_bar, c_bar = _predicted_means(z, preds)
        return z, r_bar, c_bar

    z0, r0, c0 = evaluate(0.0)
    if c0 <= target:
        return AllocationSolution(z0, 0.0, c0, r0, 0, True)

    ratios = preds.revenues / floored_costs(preds.costs)
    lam_min, lam_max = 0.0, max(float(ratios.max()), 0.0)
    lam, iters = lam_max, 0
    z, r_bar, c_bar = evaluate(lam)
    converged = True
    while lam_max - lam_min > eps:
        if iters >= budget.max_iters:
            converged = False
            break
        lam = 0.5 * (lam_max + lam_min)
        z, r_bar, c_bar = evaluate(lam)
        iters += 1
        if abs(target - c_bar) < eps:
            return AllocationSolution(z, lam, c_bar, r_bar, iters, True)
        if target - c_bar > 0:
            lam_max = lam
        else:
            lam_min = lam
    if c_bar > target + eps:
        # the midpoint landed on the over-budget side of a cost step; the
        # upper end of the bracket is the feasible side
        lam = lam_max
        z, r_bar, c_bar = evaluate(lam)
    return AllocationSolution(z, lam, c_bar, r_bar, iters, converged)


def solve_allocation(preds: PredictionMatrix, data: Dataset | None,
                     budget: BudgetSpec) -> AllocationSolution:
    """Lagrangian-relaxation solve of the budgeted assignment problem.

    With ``data`` (a full-support RCT set) the per-capita cost driving the
    bisection is the inverse-propensity estimate from factual outcomes; with
    ``data=None`` it is the predicted cost of the assignment, the only option
    at pure inference time.
    """
    if data is not None and data.n != preds.shape[0]:
        raise ValidationError("predictions and data have different row counts")
    return _bisect_lambda(preds, budget, data)


def eom_evaluate(preds: PredictionMatrix, rct: Dataset, budget: BudgetSpec):
    """Unbiased expected per-capita (revenue, cost) of the allocation policy.

    Runs the same bisection as ``solve_allocation`` on RCT data and returns
    ``(r_bar, c_bar, lambda_star)`` at the final multiplier.
    """
    if rct.source is not DataSource.RCT:
        raise ValidationError("expected-outcome evaluation needs RCT data")
    rct.require_full_support()
    sol = solve_allocation(preds, rct, budget)
    return sol.estimated_per_capita_revenue, sol.estimated_per_capita_cost, sol.lambda_star


def scale_budget(budget: BudgetSpec, from_n: int, to_n: int) -> BudgetSpec:
    """Same per-capita budget for a dataset of a different size."""
    return BudgetSpec(budget.total_budget / from_n * to_n, budget.epsilon,
                      budget.max_iters)


def brute_force_mckp(revenues: np.ndarray, costs: np.ndarray, total_budget: float):
    """Exact optimum of the primal program by exhaustive enumeration.

    Guarded to M^N <= 10^7 codes; raises on larger instances and when no
    assignment fits the budget.
    """
    revenues = np.asarray(revenues, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    n, m = revenues.shape
    if m ** n > BRUTE_FORCE_LIMIT:
        raise ValidationError(f"instance too large for enumeration: {m}^{n} > {BRUTE_FORCE_LIMIT}")
    codes = np.arange(m ** n, dtype=np.int64)
    value = np.zeros(m ** n)
    cost = np.zeros(m ** n)
    rest = codes
    for row in range(n):
        idx = rest % m
        value += revenues[row, idx]
        cost += costs[row, idx]
        rest = rest // m
    feasible = cost <= total_budget
    if not np.any(feasible):
        raise ValidationError("no feasible assignment under the budget")
    value = np.where(feasible, value, -np.inf)
    best = int(np.argmax(value))
    best_value = float(value[best])
    z = np.zeros((n, m), dtype=np.float64)
    for row in range(n):
        z[row, best % m] = 1.0
        best //= m
    return z, best_value
