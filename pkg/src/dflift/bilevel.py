"""Bi-level training of a target network guided by decision quality.

The lower level fits the target network on observational data against a
prediction loss whose counterfactual labels are gated blends of a frozen
teacher (pretrained on experimental data) and the target itself. The upper
level tunes the gating (bridge) network so that the lower-level optimum
scores well on an experimental-data decision-loss surrogate; the gradient
of that nested objective is obtained either by implicit differentiation of
the lower-level stationarity condition (conjugate-gradient solves against
Hessian-vector products) or by differentiating through a single explicit
gradient-descent step.

Single-level baselines (factual-MSE two-stage training and decision-focused
training on experimental data alone) live here too, sharing the machinery.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .allocate import BudgetSpec, eom_evaluate, scale_budget, solve_allocation
from .data import Dataset, DataSource, PredictionMatrix, ValidationError
from .losses import (
    BridgeGates,
    default_lambda_grid,
    difd_gradient_table,
    difd_loss,
    dpl_loss,
    parameterized_prediction_loss,
    pifd_gradient_table,
    pifd_loss,
    ppl_loss,
    prediction_loss_rct,
)
from .network import NetworkSpec, forward, forward_graph, init_params, save_params

SURROGATES = ("PPL", "PIFD", "DPL", "DIFD")


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)
DIFF_MODES = ("implicit", "explicit")


@dataclass(frozen=True)
class BilevelConfig:
    """Knobs of the nested optimization."""

    k: int = 5                    # assumed-update GD steps; also the upper-solve period
    n_cg: int = 50
    cg_tol: float = 1e-8
    damping: float = 1e-3         # Tikhonov term added to the lower-level Hessian
    lr_theta: float = 1e-3
    lr_phi: float = 1e-3
    warm_start_epochs: int = 20   # epochs of lower-level-only training first
    surrogate: str = "PPL"
    diff_mode: str = "implicit"

    def __post_init__(self):
        if self.k < 1 or self.n_cg < 1:
            raise ValidationError("k and n_cg must be >= 1")
        if self.surrogate not in SURROGATES:
            raise ValidationError(f"surrogate must be one of {SURROGATES}")
        if self.diff_mode not in DIFF_MODES:
            raise ValidationError(f"diff_mode must be one of {DIFF_MODES}")
        if self.damping < 0:
            raise ValidationError("damping must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    """Architecture and optimization settings shared by all trainers."""

    hidden_layers: tuple = (64, 32)
    activation: str = "relu"
    output_activation: str = "identity"
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    tau: float = 1.0
    alpha: float = 1.0            # prediction-loss weight in single-level training
    dpl_grid_size: int = 10
    teacher_epochs: int = 40
    bilevel: BilevelConfig = BilevelConfig()

    def network_spec(self, input_dim: int, num_treatments: int) -> NetworkSpec:
        return NetworkSpec(input_dim, self.hidden_layers, num_treatments,
                           self.activation, self.output_activation)

    def bridge_spec(self, input_dim: int, num_treatments: int) -> NetworkSpec:
        # bridge input is the feature vector plus a one-hot treatment index;
        # its two outputs are the revenue- and cost-gate logits
        return NetworkSpec(input_dim + num_treatments, self.hidden_layers, 1,
                           self.activation, "identity")


@dataclass
class CgInfo:
    iterations: int
    residual_norm: float
    converged: bool


def cg_solve(matvec, b: np.ndarray, n_cg: int = 50, tol: float = 1e-8,
             x0: np.ndarray | None = None):
    """Conjugate-gradient solve of ``matvec(x) = b`` for an SPD operator.

    Returns ``(x, CgInfo)``; the reported residual norm is recomputed from
    the final iterate, not the recurrence.
    """
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = x0.copy()
        r = b - matvec(x)
    p = r.copy()
    rs = float(r @ r)
    converged = np.sqrt(rs) < tol
    iters = 0
    while not converged and iters < n_cg:
        ap = matvec(p)
        if not np.all(np.isfinite(ap)):
            raise RuntimeError(
                f"conjugate gradient produced a non-finite iterate at step {iters}"
            )
        pap = float(p @ ap)
        if pap <= 0.0:
            break  # operator not positive along p; keep the best iterate
        alpha = rs / pap
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        iters += 1
        if np.sqrt(rs_new) < tol:
            converged = True
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    residual = float(np.linalg.norm(matvec(x) - b))
    return x, CgInfo(iters, residual, bool(converged))


class Adam:
    """Standard Adam with bias correction; state lives in the instance."""

    def __init__(self, size: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# generic nested-gradient machinery (loss closures over flat vectors)
# ---------------------------------------------------------------------------


def second_order_operators(inner_loss, phi: np.ndarray, theta: np.ndarray):
    """Build the lower-loss gradient graph once and return two operators:
    ``hvp(v)`` for the theta-block Hessian and ``mixed(v)`` for
    ``v^T d^2L/(d phi d theta)``."""
    p, t = ad.leaf(phi), ad.leaf(theta)
    out = inner_loss(p, t)
    (gt,) = ad.grad(out, [t], create_graph=True)

    def hvp(v: np.ndarray) -> np.ndarray:
        s = ad.vdot(gt, ad.constant(v))
        (h,) = ad.grad(s, [t])
        return h.data

    def mixed(v: np.ndarray) -> np.ndarray:
        s = ad.vdot(gt, ad.constant(v))
        (g,) = ad.grad(s, [p])
        return g.data

    return hvp, mixed


def inner_assumed_update(inner_loss, phi: np.ndarray, theta: np.ndarray,
                         k: int, lr: float) -> np.ndarray:
    """k plain gradient-descent steps on a copy of theta; the caller's theta
    is never touched."""
    cur = theta.copy()
    for _ in range(k):
        g = ad.gradient(lambda t: inner_loss(ad.constant(phi), t), cur)
        cur = cur - lr * g
    return cur


def implicit_hypergradient(inner_loss, phi: np.ndarray, theta_star: np.ndarray,
                           outer_grad: np.ndarray, cfg: BilevelConfig):
    """Hypergradient over phi assuming theta_star is lower-level stationary.

    Solves ``(H + damping I) x = outer_grad`` matrix-free with CG, then
    returns ``-(x^T d^2L/(d phi d theta))`` and the CG diagnostics.
    """
    hvp, mixed = second_order_operators(inner_loss, phi, theta_star)
    damping = cfg.damping

    def matvec(v):
        return hvp(v) + damping * v

    x, info = cg_solve(matvec, outer_grad, n_cg=cfg.n_cg, tol=cfg.cg_tol)
    return -mixed(x), info


def explicit_hypergradient(inner_loss, phi: np.ndarray, theta: np.ndarray,
                           outer_grad: np.ndarray, lr_theta: float) -> np.ndarray:
    """Hypergradient from differentiating one explicit GD step on theta."""
    _, mixed = second_order_operators(inner_loss, phi, theta)
    return -lr_theta * mixed(outer_grad)


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_eom: float | None = None
    val_cost: float | None = None
    lambda_star: float | None = None
    cg_residual: float | None = None
    cg_iterations: int | None = None
    upper_steps: int = 0
    wall_time: float = 0.0


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_eom: float | None = None
    aborted: bool = False
    abort_reason: str | None = None

    def to_dict(self):
        return {
            "epochs": [vars(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_eom": self.best_val_eom,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
        }


@dataclass
class TrainerState:
    theta: np.ndarray
    phi: np.ndarray | None = None
    psi: np.ndarray | None = None
    batches_seen: int = 0
    upper_steps: int = 0


def _epoch_batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _val_eom(spec, theta, rct_val, budget, train_n):
    preds = forward(spec, theta, rct_val.features)
    r_bar, c_bar, _ = eom_evaluate(preds, rct_val, scale_budget(budget, train_n, rct_val.n))
    return r_bar, c_bar


class _Selector:
    """Tracks the checkpoint with the best validation policy value.

    The policy value is only meaningful when the multiplier search actually
    met the budget, so checkpoints whose realized per-capita cost exceeds the
    target by more than ``slack`` rank below every feasible one (and among
    themselves by smallest overspend).
    """

    SLACK = 0.05

    def __init__(self, target_cost: float):
        self.target = target_cost
        self.best_key = None
        self.best_eom = None
        self.best_theta = None
        self.best_epoch = None

    def _key(self, eom, cost):
        feasible = cost <= self.target * (1.0 + self.SLACK)
        return (1, eom) if feasible else (0, -cost)

    def update(self, epoch, eom, cost, theta):
        key = self._key(eom, cost)
        if self.best_key is None or key > self.best_key:
            self.best_key = key
            self.best_eom = eom
            self.best_theta = theta.copy()
            self.best_epoch = epoch

    def pick(self, fallback):
        return fallback if self.best_theta is None else self.best_theta


def train_baseline_tsm(ds: Dataset, spec: NetworkSpec, epochs: int, seed: int,
                       cfg: TrainConfig = TrainConfig(), rct_val: Dataset | None = None,
                       budget: BudgetSpec | None = None):
    """Two-stage baseline: factual mean-squared-error training only.

    With a validation RCT split and a budget, the checkpoint with the best
    validation policy value is returned; otherwise the final parameters.
    """
    ss = _seed_sequence(seed)
    init_ss, shuffle_ss = ss.spawn(2)
    theta = init_params(spec, init_ss)
    rng = np.random.default_rng(shuffle_ss)
    opt = Adam(theta.size, lr=cfg.lr)
    log = TrainingLog()
    selector = (_Selector(budget.total_budget / ds.n) if budget is not None
                else _Selector(np.inf))
    start = time.perf_counter()
    for epoch in range(epochs):
        losses = []
        for idx in _epoch_batches(ds.n, cfg.batch_size, rng):
            batch = ds.subset(idx)

            def loss_fn(p):
                rev, cost = forward_graph(spec, p, batch.features)
                return prediction_loss_rct(PredictionMatrix(rev, cost), batch)

            value, g = ad.value_and_grad(loss_fn, theta)
            theta = opt.step(theta, g)
            losses.append(value)
        if not np.all(np.isfinite(theta)):
            log.aborted = True
            log.abort_reason = f"non-finite parameters at epoch {epoch}"
            theta = selector.pick(theta)
            break
        rec = EpochRecord(epoch, float(np.mean(losses)),
                          wall_time=time.perf_counter() - start)
        if rct_val is not None and budget is not None:
            rec.val_eom, rec.val_cost = _val_eom(spec, theta, rct_val, budget, ds.n)
            selector.update(epoch, rec.val_eom, rec.val_cost, theta)
        log.epochs.append(rec)
    log.best_epoch = selector.best_epoch
    log.best_val_eom = None if selector.best_theta is None else selector.best_eom
    return selector.pick(theta), log


def pretrain_teacher(rct: Dataset, spec: NetworkSpec, epochs: int, seed: int,
                     cfg: TrainConfig = TrainConfig()):
    """Factual-MSE pretraining on experimental data; frozen afterwards."""
    theta, _ = train_baseline_tsm(rct, spec, epochs, seed, cfg)
    return theta


def _surrogate_closure(surrogate: str, spec: NetworkSpec, rct: Dataset,
                       budget: BudgetSpec, theta: np.ndarray, cfg: TrainConfig):
    """Freeze the multiplier (and any gradient tables) at the current
    predictions, then return a differentiable loss over theta on the full
    experimental set plus the frozen scalars for logging."""
    preds = forward(spec, theta, rct.features)
    if surrogate == "PPL":
        lam = solve_allocation(preds, rct, budget).lambda_star

        def loss_fn(p):
            rev, cost = forward_graph(spec, p, rct.features)
            return ppl_loss(PredictionMatrix(rev, cost), rct, lam, cfg.tau)

        return loss_fn, lam
    if surrogate == "PIFD":
        table = pifd_gradient_table(preds, rct, budget)

        def loss_fn(p):
            rev, cost = forward_graph(spec, p, rct.features)
            return pifd_loss(PredictionMatrix(rev, cost), table, cfg.tau)

        return loss_fn, table.lambda_star
    if surrogate == "DPL":
        grid = default_lambda_grid(preds, cfg.dpl_grid_size)

        def loss_fn(p):
            rev, cost = forward_graph(spec, p, rct.features)
            return dpl_loss(PredictionMatrix(rev, cost), rct, grid, cfg.tau)

        return loss_fn, float(grid[-1])
    if surrogate == "DIFD":
        grid = default_lambda_grid(preds, cfg.dpl_grid_size)
        tables = [difd_gradient_table(preds, rct, lam) for lam in grid]

        def loss_fn(p):
            rev, cost = forward_graph(spec, p, rct.features)
            return difd_loss(PredictionMatrix(rev, cost), tables, cfg.tau)

        return loss_fn, float(grid[-1])
    raise ValidationError(f"unknown surrogate {surrogate!r}")


def train_dfcl(rct: Dataset, budget: BudgetSpec, cfg: TrainConfig, seed: int,
               rct_val: Dataset | None = None, surrogate: str | None = None):
    """Single-level decision-focused training on experimental data.

    Minimizes ``surrogate + alpha * factual MSE``; the multiplier and any
    gradient tables are refrozen at the start of every epoch.
    """
    if rct.source is not DataSource.RCT:
        raise ValidationError("decision-focused training needs RCT data")
    rct.require_full_support()
    surrogate = surrogate or cfg.bilevel.surrogate
    spec = cfg.network_spec(rct.feature_dim, rct.num_treatments)
    ss = _seed_sequence(seed)
    init_ss, shuffle_ss = ss.spawn(2)
    theta = init_params(spec, init_ss)
    rng = np.random.default_rng(shuffle_ss)
    opt = Adam(theta.size, lr=cfg.lr)
    log = TrainingLog()
    selector = _Selector(budget.total_budget / rct.n)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        surr_fn, lam = _surrogate_closure(surrogate, spec, rct, budget, theta, cfg)
        losses = []
        for idx in _epoch_batches(rct.n, cfg.batch_size, rng):
            batch = rct.subset(idx)

            def loss_fn(p):
                total = surr_fn(p)
                if cfg.alpha > 0:
                    rev, cost = forward_graph(spec, p, batch.features)
                    mse = prediction_loss_rct(PredictionMatrix(rev, cost), batch)
                    total = ad.add(total, ad.mul(cfg.alpha, mse))
                return total

            value, g = ad.value_and_grad(loss_fn, theta)
            theta = opt.step(theta, g)
            losses.append(value)
        if not np.all(np.isfinite(theta)):
            log.aborted = True
            log.abort_reason = f"non-finite parameters at epoch {epoch}"
            theta = selector.pick(theta)
            break
        rec = EpochRecord(epoch, float(np.mean(losses)), lambda_star=lam,
                          wall_time=time.perf_counter() - start)
        if rct_val is not None:
            rec.val_eom, rec.val_cost = _val_eom(spec, theta, rct_val, budget, rct.n)
            selector.update(epoch, rec.val_eom, rec.val_cost, theta)
        log.epochs.append(rec)
    log.best_epoch = selector.best_epoch
    log.best_val_eom = None if selector.best_theta is None else selector.best_eom
    return selector.pick(theta), log


class BidfclTrainer:
    """Nested trainer: a target network on observational batches below, a
    bridge (gating) network driven by experimental decision quality above."""

    def __init__(self, obs: Dataset, rct: Dataset, budget: BudgetSpec,
                 cfg: TrainConfig, seed: int, rct_val: Dataset | None = None,
                 teacher: np.ndarray | None = None, out_dir=None):
        if obs.source is not DataSource.OBS:
            raise ValidationError("lower-level data must be tagged OBS")
        if rct.source is not DataSource.RCT:
            raise ValidationError("upper-level data must be tagged RCT")
        rct.require_full_support()
        if obs.num_treatments != rct.num_treatments:
            raise ValidationError("treatment counts disagree between OBS and RCT")
        self.obs, self.rct, self.rct_val = obs, rct, rct_val
        self.budget, self.cfg, self.seed = budget, cfg, seed
        self.out_dir = out_dir
        self.m = rct.num_treatments
        self.spec = cfg.network_spec(obs.feature_dim, self.m)
        self.bridge = cfg.bridge_spec(obs.feature_dim, self.m)
        ss = _seed_sequence(seed)
        theta_ss, phi_ss, teacher_ss, shuffle_ss = ss.spawn(4)
        self.rng = np.random.default_rng(shuffle_ss)
        if teacher is None:
            teacher = pretrain_teacher(rct, self.spec, cfg.teacher_epochs, teacher_ss, cfg)
        self.state = TrainerState(theta=init_params(self.spec, theta_ss),
                                  phi=init_params(self.bridge, phi_ss),
                                  psi=teacher)

    # -- lower-level loss over one observational batch ---------------------

    def _bridge_inputs(self, features: np.ndarray) -> np.ndarray:
        n = features.shape[0]
        tiled = np.repeat(features, self.m, axis=0)
        hot = np.tile(np.eye(self.m), (n, 1))
        return np.concatenate([tiled, hot], axis=1)

    def _batch_context(self, idx):
        batch = self.obs.subset(idx)
        teacher_preds = forward(self.spec, self.state.psi, batch.features)
        return batch, teacher_preds, self._bridge_inputs(batch.features)

    def lower_loss(self, phi_t, theta_t, ctx):
        batch, teacher_preds, zb = ctx
        rev, cost = forward_graph(self.spec, theta_t, batch.features)
        glog_r, glog_c = forward_graph(self.bridge, phi_t, zb)
        w_r = ad.reshape(ad.sigmoid(glog_r), (batch.n, self.m))
        w_c = ad.reshape(ad.sigmoid(glog_c), (batch.n, self.m))
        return parameterized_prediction_loss(
            PredictionMatrix(rev, cost), teacher_preds, BridgeGates(w_r, w_c), batch
        )

    # -- spec-level operations ---------------------------------------------

    def inner_assumed_update(self, idx, k: int | None = None) -> np.ndarray:
        ctx = self._batch_context(idx)
        k = self.cfg.bilevel.k if k is None else k
        return inner_assumed_update(lambda p, t: self.lower_loss(p, t, ctx),
                                    self.state.phi, self.state.theta, k,
                                    self.cfg.bilevel.lr_theta)

    def outer_grad(self, theta_star: np.ndarray):
        surr_fn, lam = _surrogate_closure(self.cfg.bilevel.surrogate, self.spec,
                                          self.rct, self.budget, theta_star, self.cfg)
        return ad.gradient(surr_fn, theta_star), lam

    def hypergradient_implicit(self, theta_star: np.ndarray, idx):
        return self._implicit_step(theta_star, self._batch_context(idx))

    def _implicit_step(self, theta_star, ctx):
        g, lam = self.outer_grad(theta_star)
        hyper, info = implicit_hypergradient(
            lambda p, t: self.lower_loss(p, t, ctx), self.state.phi, theta_star,
            g, self.cfg.bilevel
        )
        return hyper, lam, info

    def hypergradient_explicit(self, idx):
        return self._explicit_step(self._batch_context(idx))

    def _explicit_step(self, ctx):
        lr = self.cfg.bilevel.lr_theta
        theta_star = inner_assumed_update(lambda p, t: self.lower_loss(p, t, ctx),
                                          self.state.phi, self.state.theta, 1, lr)
        g, lam = self.outer_grad(theta_star)
        hyper = explicit_hypergradient(lambda p, t: self.lower_loss(p, t, ctx),
                                       self.state.phi, self.state.theta, g, lr)
        return hyper, lam, None

    # -- main loop -----------------------------------------------------------

    def run(self):
        cfg, bl = self.cfg, self.cfg.bilevel
        adam_theta = Adam(self.state.theta.size, lr=bl.lr_theta)
        adam_phi = Adam(self.state.phi.size, lr=bl.lr_phi)
        log = TrainingLog()
        selector = _Selector(self.budget.total_budget / self.rct.n)
        last_good = (self.state.theta.copy(), self.state.phi.copy())
        start = time.perf_counter()
        last_lam = None
        last_info = None
        for epoch in range(cfg.epochs):
            warm = epoch < bl.warm_start_epochs
            losses = []
            for idx in _epoch_batches(self.obs.n, cfg.batch_size, self.rng):
                ctx = self._batch_context(idx)
                if not warm and self.state.batches_seen % bl.k == 0:
                    if bl.diff_mode == "implicit":
                        theta_star = inner_assumed_update(
                            lambda p, t: self.lower_loss(p, t, ctx),
                            self.state.phi, self.state.theta, bl.k, bl.lr_theta,
                        )
                        hyper, last_lam, last_info = self._implicit_step(theta_star, ctx)
                    else:
                        hyper, last_lam, last_info = self._explicit_step(ctx)
                    self.state.phi = adam_phi.step(self.state.phi, hyper)
                    self.state.upper_steps += 1
                value, g = ad.value_and_grad(
                    lambda t: self.lower_loss(ad.constant(self.state.phi), t, ctx),
                    self.state.theta,
                )
                self.state.theta = adam_theta.step(self.state.theta, g)
                self.state.batches_seen += 1
                losses.append(value)
            if not (np.all(np.isfinite(self.state.theta))
                    and np.all(np.isfinite(self.state.phi))):
                log.aborted = True
                log.abort_reason = f"non-finite parameters at epoch {epoch}"
                self.state.theta, self.state.phi = last_good
                break
            last_good = (self.state.theta.copy(), self.state.phi.copy())
            rec = EpochRecord(epoch, float(np.mean(losses)), lambda_star=last_lam,
                              upper_steps=self.state.upper_steps,
                              wall_time=time.perf_counter() - start)
            if last_info is not None:
                rec.cg_residual = last_info.residual_norm
                rec.cg_iterations = last_info.iterations
            if self.rct_val is not None:
                rec.val_eom, rec.val_cost = _val_eom(self.spec, self.state.theta,
                                                     self.rct_val, self.budget, self.rct.n)
                selector.update(epoch, rec.val_eom, rec.val_cost,
                                self.state.theta)

            log.epochs.append(rec)
            if self.out_dir is not None:
                save_params(f"{self.out_dir}/epoch_{epoch:04d}.ckpt", self.spec,
                            self.state.theta)
        log.best_epoch = selector.best_epoch
        log.best_val_eom = None if selector.best_theta is None else selector.best_eom
        self.state.theta = selector.pick(self.state.theta)
        return self.state, log


def train_bidfcl(obs: Dataset, rct: Dataset, budget: BudgetSpec, cfg: TrainConfig,
                 seed: int, rct_val: Dataset | None = None,
                 teacher: np.ndarray | None = None, out_dir=None):
    """Run the full nested training loop; returns (state, log) where the
    state's theta is the best-validation checkpoint when a validation split
    was supplied."""
    return BidfclTrainer(obs, rct, budget, cfg, seed, rct_val, teacher, out_dir).run()
