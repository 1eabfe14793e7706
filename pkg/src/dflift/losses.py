"""Training objectives for decision-focused treatment-response models.

Differentiable losses accept graph tensors in the prediction slots and plain
float labels/weights from the dataset; called with plain arrays they return a
float. The hard decision loss is evaluation-only and never backpropagated;
its gradient information enters training either through a softmax policy
relaxation at the solved multiplier or through frozen per-entry gradient
tables built by minimal score perturbations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .allocate import BudgetSpec, floored_costs, solve_allocation
from .data import COST_FLOOR, Dataset, PredictionMatrix, ValidationError

H_FLOOR = 1e-6


@dataclass
class BridgeGates:
    """Gating coefficients in (0,1) blending teacher and target predictions."""

    w_r: object
    w_c: object

    def __post_init__(self):
        for w in (self.w_r, self.w_c):
            if isinstance(w, np.ndarray) and (np.min(w) <= 0.0 or np.max(w) >= 1.0):
                raise ValidationError("gates must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class CounterfactualLabels:
    r_cf: np.ndarray
    c_cf: np.ndarray


@dataclass(frozen=True)
class SurrogateGradientTable:
    """Frozen per-entry gradients of the decision loss in the relaxed
    assignment, plus the multiplier they were computed at."""

    dL_dz: np.ndarray
    lambda_star: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.dL_dz)):
            raise ValidationError("gradient table must be finite")


def _is_tensor_input(preds) -> bool:
    return isinstance(preds.revenues, ad.Tensor) or isinstance(preds.costs, ad.Tensor)


def _finish(out: ad.Tensor, tensor_in: bool):
    return out if tensor_in else float(out.data)


def _onehot(treatments: np.ndarray, m: int) -> np.ndarray:
    z = np.zeros((treatments.size, m))
    z[np.arange(treatments.size), treatments] = 1.0
    return z


def _scores(preds, lam: float):
    r = ad.as_tensor(preds.revenues)
    c = ad.clip_min(ad.as_tensor(preds.costs), COST_FLOOR)
    return ad.sub(r, ad.mul(float(lam), c))


def prediction_loss_rct(preds, ds: Dataset):
    """Mean squared factual error over both heads.

    Only the observed (i, t_i) entries contribute; the remaining entries have
    no labels.
    """
    tensor_in = _is_tensor_input(preds)
    onehot = _onehot(ds.treatments, ds.num_treatments)
    r_hat = ad.sum_(ad.mul(ad.as_tensor(preds.revenues), onehot), axis=1)
    c_hat = ad.sum_(ad.mul(ad.as_tensor(preds.costs), onehot), axis=1)
    out = ad.mean(ad.add(ad.power(ad.sub(r_hat, ds.revenues), 2.0),
                         ad.power(ad.sub(c_hat, ds.costs), 2.0)))
    return _finish(out, tensor_in)


def counterfactual_labels(target_preds, teacher_preds, gates: BridgeGates) -> CounterfactualLabels:
    """Gated convex blend of teacher and target predictions (plain arrays)."""
    w_r = np.asarray(getattr(gates.w_r, "data", gates.w_r))
    w_c = np.asarray(getattr(gates.w_c, "data", gates.w_c))
    t_r = np.asarray(getattr(target_preds.revenues, "data", target_preds.revenues))
    t_c = np.asarray(getattr(target_preds.costs, "data", target_preds.costs))
    s_r = np.asarray(getattr(teacher_preds.revenues, "data", teacher_preds.revenues))
    s_c = np.asarray(getattr(teacher_preds.costs, "data", teacher_preds.costs))
    return CounterfactualLabels(s_r * w_r + t_r * (1.0 - w_r),
                                s_c * w_c + t_c * (1.0 - w_c))


def parameterized_prediction_loss(target_preds, teacher_preds, gates: BridgeGates,
                                  ds: Dataset):
    """Factual squared error plus a gated counterfactual term.

    For the unobserved (i, j != t_i) entries the label is the gated blend of
    teacher and target predictions, so the residual reduces to
    ``w * (teacher - target)`` and the target-parameter dependence of the
    label is kept exactly as written.
    """
    tensor_in = (_is_tensor_input(target_preds)
                 or isinstance(gates.w_r, ad.Tensor) or isinstance(gates.w_c, ad.Tensor))
    n, m = ds.n, ds.num_treatments
    onehot = _onehot(ds.treatments, m)
    t_r, t_c = ad.as_tensor(target_preds.revenues), ad.as_tensor(target_preds.costs)
    r_hat = ad.sum_(ad.mul(t_r, onehot), axis=1)
    c_hat = ad.sum_(ad.mul(t_c, onehot), axis=1)
    factual = ad.mean(ad.add(ad.power(ad.sub(r_hat, ds.revenues), 2.0),
                             ad.power(ad.sub(c_hat, ds.costs), 2.0)))
    if m == 1:
        return _finish(factual, tensor_in)
    res_r = ad.mul(ad.as_tensor(gates.w_r),
                   ad.sub(ad.as_tensor(teacher_preds.revenues), t_r))
    res_c = ad.mul(ad.as_tensor(gates.w_c),
                   ad.sub(ad.as_tensor(teacher_preds.costs), t_c))
    mask = 1.0 - onehot
    cf_sum = ad.sum_(ad.mul(mask, ad.add(ad.power(res_r, 2.0), ad.power(res_c, 2.0))))
    out = ad.add(factual, ad.mul(cf_sum, 1.0 / (n * (m - 1))))
    return _finish(out, tensor_in)


def decision_loss_unbiased(preds: PredictionMatrix, rct: Dataset,
                           budget: BudgetSpec) -> float:
    """Negative inverse-propensity policy revenue of the solved allocation.

    Evaluation-only: the argmax assignment makes this piecewise constant in
    the predictions, so it is never differentiated directly.
    """
    rct.require_full_support()
    sol = solve_allocation(preds, rct, budget)
    return -sol.estimated_per_capita_revenue


def ppl_loss(preds, rct: Dataset, lambda_star: float, tau: float = 1.0):
    """Policy-learning surrogate: softmax relaxation of the assignment at the
    solved multiplier, weighting each sample's factual revenue.

    ``tau`` is the entropy temperature; tau -> 0 recovers the hard decision
    loss on tie-free instances.
    """
    if tau <= 0:
        raise ValidationError("tau must be > 0")
    tensor_in = _is_tensor_input(preds)
    t = rct.treatments
    z = ad.softmax(ad.mul(_scores(preds, lambda_star), 1.0 / tau), axis=1)
    picked = ad.sum_(ad.mul(z, _onehot(t, rct.num_treatments)), axis=1)
    weights = rct.revenues / rct.propensities[t]
    out = ad.neg(ad.mean(ad.mul(picked, weights)))
    return _finish(out, tensor_in)


def dpl_loss(preds, rct: Dataset, lambdas, tau: float = 1.0):
    """Multiplier-grid surrogate: sum over a user-chosen lambda grid of the
    softmax-relaxed policy value of the dualized payoff ``r - lambda * c``."""
    if tau <= 0:
        raise ValidationError("tau must be > 0")
    lambdas = list(np.atleast_1d(np.asarray(lambdas, dtype=np.float64)))
    if not lambdas:
        raise ValidationError("lambda grid must be non-empty")
    tensor_in = _is_tensor_input(preds)
    t = rct.treatments
    onehot = _onehot(t, rct.num_treatments)
    inv_p = 1.0 / rct.propensities[t]
    total = ad.constant(0.0)
    for lam in lambdas:
        z = ad.softmax(ad.mul(_scores(preds, lam), 1.0 / tau), axis=1)
        picked = ad.sum_(ad.mul(z, onehot), axis=1)
        payoff = (rct.revenues - lam * rct.costs) * inv_p
        total = ad.add(total, ad.neg(ad.mean(ad.mul(picked, payoff))))
    return _finish(total, tensor_in)


def default_lambda_grid(preds: PredictionMatrix, size: int = 10) -> np.ndarray:
    """Evenly spaced multipliers spanning [0, max predicted revenue/cost]."""
    hi = float(np.max(preds.revenues / floored_costs(preds.costs)))
    return np.linspace(0.0, max(hi, 0.0), size)


def _ifd_table(scores: np.ndarray, payoff: np.ndarray, rct: Dataset,
               h_floor: float) -> np.ndarray:
    """Per-entry decision-loss gradients from minimal score perturbations.

    ``scores`` is the N x M dual score matrix, ``payoff`` the per-sample
    factual payoff entering the policy value. For each sample the table holds
    the payoff change from flipping the argmax, divided by the signed score
    gap that causes the flip; gaps are floored at ``h_floor`` in magnitude.
    """
    n, m = scores.shape
    t = rct.treatments
    rows = np.arange(n)
    chosen = np.argmax(scores, axis=1)
    weight = payoff / (n * rct.propensities[t])

    masked = scores.copy()
    masked[rows, t] = -np.inf
    runner_up = masked.max(axis=1)

    grad_neg = np.zeros((n, m))
    matching = chosen == t

    # matching rows: own-column gap is (runner-up - top) <= 0, the other
    # columns use (top - that column) >= 0
    if np.any(matching):
        i = rows[matching]
        h_own = np.minimum(runner_up[i] - scores[i, t[i]], -h_floor)
        grad_neg[i, t[i]] = -weight[i] / h_own
        gaps = np.maximum(scores[i, t[i]][:, None] - scores[i], h_floor)
        others = -weight[i][:, None] / gaps
        others[np.arange(i.size), t[i]] = grad_neg[i, t[i]]
        grad_neg[i] = others

    # mismatching rows: only the received column and the current winner get
    # entries, with equal magnitude and opposite sign
    mism = ~matching
    if np.any(mism):
        i = rows[mism]
        j = chosen[mism]
        h_own = np.maximum(scores[i, j] - scores[i, t[i]], h_floor)
        grad_neg[i, t[i]] = weight[i] / h_own
        grad_neg[i, j] = -weight[i] / h_own

    return -grad_neg


def pifd_gradient_table(preds: PredictionMatrix, rct: Dataset, budget: BudgetSpec,
                        h_floor: float = H_FLOOR) -> SurrogateGradientTable:
    """Frozen decision-loss gradient table at the solved multiplier."""
    sol = solve_allocation(preds, rct, budget)
    scores = preds.revenues - sol.lambda_star * floored_costs(preds.costs)
    table = _ifd_table(scores, rct.revenues, rct, h_floor)
    return SurrogateGradientTable(table, sol.lambda_star)


def difd_gradient_table(preds: PredictionMatrix, rct: Dataset, lam: float,
                        h_floor: float = H_FLOOR) -> SurrogateGradientTable:
    """Frozen dual decision-loss gradient table at a caller-chosen multiplier;
    the payoff is ``r - lambda * c`` and no budget search is run."""
    scores = preds.revenues - lam * floored_costs(preds.costs)
    payoff = rct.revenues - lam * rct.costs
    return SurrogateGradientTable(_ifd_table(scores, payoff, rct, h_floor), float(lam))


def pifd_loss(preds, table: SurrogateGradientTable, tau: float = 1.0):
    """Mean of frozen table entries times the softmax-relaxed assignment.

    Gradients flow only through the relaxation; the table is constant.
    """
    if tau <= 0:
        raise ValidationError("tau must be > 0")
    tensor_in = _is_tensor_input(preds)
    z = ad.softmax(ad.mul(_scores(preds, table.lambda_star), 1.0 / tau), axis=1)
    out = ad.mean(ad.mul(z, table.dL_dz))
    return _finish(out, tensor_in)


def difd_loss(preds, tables, tau: float = 1.0):
    """Sum of the per-multiplier frozen-table surrogates."""
    if not tables:
        raise ValidationError("lambda grid must be non-empty")
    tensor_in = _is_tensor_input(preds)
    total = ad.constant(0.0)
    for table in tables:
        z = ad.softmax(ad.mul(_scores(preds, table.lambda_star), 1.0 / tau), axis=1)
        total = ad.add(total, ad.mean(ad.mul(z, table.dL_dz)))
    return _finish(total, tensor_in)
