import numpy as np
import pytest

from dflift import autodiff as ad
from dflift.allocate import BudgetSpec, solve_allocation
from dflift.data import Dataset, DataSource, PredictionMatrix, ValidationError
from oracles import black_box_decision_table

from dflift.losses import (
    BridgeGates,
    SurrogateGradientTable,
    counterfactual_labels,
    decision_loss_unbiased,
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


def rct_dataset(n=40, m=3, seed=0, costs=None):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, m, n)
    revenue = rng.uniform(0.5, 2.5, n)
    cost = rng.uniform(0.1, 1.0, n) if costs is None else costs
    return Dataset(rng.normal(size=(n, 2)), t, revenue, cost, m, DataSource.RCT)


def random_preds(n, m, seed=0):
    rng = np.random.default_rng(seed)
    return PredictionMatrix(rng.uniform(0.5, 2.5, (n, m)), rng.uniform(0.1, 1.0, (n, m)))


class TestPredictionLoss:
    def test_perfect_predictions_zero(self):
        ds = rct_dataset(n=10, m=2)
        r_hat = np.zeros((10, 2))
        c_hat = np.full((10, 2), 0.5)
        r_hat[np.arange(10), ds.treatments] = ds.revenues
        c_hat[np.arange(10), ds.treatments] = ds.costs
        assert prediction_loss_rct(PredictionMatrix(r_hat, c_hat), ds) == 0.0

    def test_unit_error(self):
        ds = Dataset(np.zeros((1, 1)), [0], [1.0], [0.5], 1, DataSource.RCT)
        preds = PredictionMatrix(np.array([[0.0]]), np.array([[0.5]]))
        assert prediction_loss_rct(preds, ds) == 1.0

    def test_quadratic_scaling(self):
        ds = rct_dataset(n=15, m=2, seed=3)
        base_r = np.zeros((15, 2))
        base_c = np.zeros((15, 2))
        base_r[np.arange(15), ds.treatments] = ds.revenues
        base_c[np.arange(15), ds.treatments] = ds.costs
        one = prediction_loss_rct(PredictionMatrix(base_r + 0.1, base_c), ds)
        two = prediction_loss_rct(PredictionMatrix(base_r + 0.2, base_c), ds)
        # doubling every residual quadruples the loss (costs kept exact, but
        # their residual picks up the cost floor only if predictions are low)
        np.testing.assert_allclose(two, 4 * one, rtol=1e-9)


class TestParameterizedPredictionLoss:
    def make_inputs(self, n=12, m=3, seed=1):
        rng = np.random.default_rng(seed)
        ds = rct_dataset(n=n, m=m, seed=seed)
        ds = Dataset(ds.features, ds.treatments, ds.revenues, ds.costs, m, DataSource.OBS)
        target = random_preds(n, m, seed + 1)
        teacher = random_preds(n, m, seed + 2)
        gates = BridgeGates(rng.uniform(0.2, 0.8, (n, m)), rng.uniform(0.2, 0.8, (n, m)))
        return ds, target, teacher, gates

    def test_teacher_equals_target_leaves_factual_only(self):
        ds, target, _, _ = self.make_inputs()
        gates = BridgeGates(np.full((12, 3), 0.5), np.full((12, 3), 0.5))
        got = parameterized_prediction_loss(target, target, gates, ds)
        np.testing.assert_allclose(got, prediction_loss_rct(target, ds), rtol=1e-12)

    def test_gate_one_limit_is_teacher_distillation(self):
        ds, target, teacher, _ = self.make_inputs()
        w = np.full((12, 3), 1 - 1e-12)
        gates = BridgeGates(w, w)
        got = parameterized_prediction_loss(target, teacher, gates, ds)
        mask = np.ones((12, 3))
        mask[np.arange(12), ds.treatments] = 0.0
        cf = (mask * ((teacher.revenues - target.revenues) ** 2
                      + (teacher.costs - target.costs) ** 2)).sum() / (12 * 2)
        expected = prediction_loss_rct(target, ds) + cf
        np.testing.assert_allclose(got, expected, rtol=1e-9)

    def test_gate_zero_limit_drops_counterfactual_term(self):
        ds, target, teacher, _ = self.make_inputs()
        w = np.full((12, 3), 1e-12)
        gates = BridgeGates(w, w)
        got = parameterized_prediction_loss(target, teacher, gates, ds)
        np.testing.assert_allclose(got, prediction_loss_rct(target, ds), atol=1e-9)

    def test_counterfactual_labels_recomputable(self):
        _, target, teacher, gates = self.make_inputs()
        labels = counterfactual_labels(target, teacher, gates)
        expected_r = teacher.revenues * gates.w_r + target.revenues * (1 - gates.w_r)
        np.testing.assert_allclose(labels.r_cf, expected_r, rtol=1e-12)
        expected_c = teacher.costs * gates.w_c + target.costs * (1 - gates.w_c)
        np.testing.assert_allclose(labels.c_cf, expected_c, rtol=1e-12)

    def test_single_treatment_has_no_counterfactual_term(self):
        ds = Dataset(np.zeros((4, 1)), [0] * 4, np.ones(4), np.ones(4), 1, DataSource.OBS)
        preds = PredictionMatrix(np.full((4, 1), 2.0), np.ones((4, 1)))
        gates = BridgeGates(np.full((4, 1), 0.9), np.full((4, 1), 0.9))
        got = parameterized_prediction_loss(preds, preds, gates, ds)
        assert got == prediction_loss_rct(preds, ds)


class TestDecisionLoss:
    def test_single_treatment_collapses_to_negative_mean_revenue(self):
        ds = rct_dataset(n=30, m=1, seed=2)
        preds = PredictionMatrix(np.ones((30, 1)), np.full((30, 1), 0.5))
        got = decision_loss_unbiased(preds, ds, BudgetSpec(total_budget=100.0))
        np.testing.assert_allclose(got, -ds.revenues.mean(), rtol=1e-12)

    def test_zero_revenue_control_gives_zero(self):
        n = 20
        rng = np.random.default_rng(3)
        t = rng.integers(0, 2, n)
        revenue = np.where(t == 0, 0.0, rng.uniform(1, 2, n))
        ds = Dataset(np.zeros((n, 1)), t, revenue, np.full(n, 0.1), 2, DataSource.RCT)
        preds = PredictionMatrix(np.tile([5.0, 0.0], (n, 1)), np.full((n, 2), 0.01))
        got = decision_loss_unbiased(preds, ds, BudgetSpec(total_budget=1e3))
        assert got == 0.0

    def test_unbiased_against_full_information_value(self):
        rng = np.random.default_rng(4)
        n, m = 400, 3
        table_r = rng.uniform(0.5, 2.5, (n, m))
        table_c = np.sort(rng.uniform(0.05, 1.0, (n, m)), axis=1)
        preds = PredictionMatrix(rng.uniform(0.5, 2.5, (n, m)), table_c.copy())
        budget = BudgetSpec(total_budget=0.35 * n)
        chosen = solve_allocation(preds, None, budget).chosen
        truth = -table_r[np.arange(n), chosen].mean()  # = -M * E_ij[z* r]
        draws = []
        for _ in range(400):
            t = rng.integers(0, m, n)
            ds = Dataset(np.zeros((n, 1)), t, table_r[np.arange(n), t],
                         table_c[np.arange(n), t], m, DataSource.RCT)
            w = (chosen == t) / ds.propensities[t]
            draws.append(-float(np.sum(w * ds.revenues) / n))
        draws = np.asarray(draws)
        se = draws.std(ddof=1) / np.sqrt(len(draws))
        assert abs(draws.mean() - truth) < 3 * se


class TestPplLoss:
    def test_uniform_scores_give_uniform_policy(self):
        ds = rct_dataset(n=60, m=3, seed=5)
        preds = PredictionMatrix(np.ones((60, 3)), np.ones((60, 3)))
        got = ppl_loss(preds, ds, lambda_star=0.0, tau=1.0)
        group_means = [ds.revenues[ds.treatments == j].mean() for j in range(3)]
        np.testing.assert_allclose(got, -np.mean(group_means), rtol=1e-9)

    def test_tau_to_zero_recovers_hard_decision_loss(self):
        ds = rct_dataset(n=50, m=3, seed=6)
        preds = random_preds(50, 3, seed=7)
        budget = BudgetSpec(total_budget=0.3 * 50)
        sol = solve_allocation(preds, ds, budget)
        hard = decision_loss_unbiased(preds, ds, budget)
        soft = ppl_loss(preds, ds, sol.lambda_star, tau=1e-3)
        assert abs(soft - hard) < 1e-3 * (1 + abs(hard))

    def test_invalid_tau_rejected(self):
        ds = rct_dataset(n=5, m=2, seed=8)
        with pytest.raises(ValidationError):
            ppl_loss(random_preds(5, 2), ds, 0.1, tau=0.0)


class TestDplLoss:
    def test_reduces_to_ppl_when_costs_zero(self):
        n, m = 30, 3
        rng = np.random.default_rng(9)
        t = rng.integers(0, m, n)
        ds = Dataset(np.zeros((n, 1)), t, rng.uniform(1, 2, n), np.zeros(n), m,
                     DataSource.RCT)
        preds = random_preds(n, m, seed=10)
        lam = 0.7
        np.testing.assert_allclose(dpl_loss(preds, ds, [lam], tau=1.0),
                                   ppl_loss(preds, ds, lam, tau=1.0), rtol=1e-12)

    def test_single_treatment_sum(self):
        ds = rct_dataset(n=25, m=1, seed=11)
        preds = PredictionMatrix(np.ones((25, 1)), np.ones((25, 1)))
        grid = [0.0, 0.5, 1.0]
        got = dpl_loss(preds, ds, grid)
        expected = sum(-(ds.revenues - lam * ds.costs).mean() for lam in grid)
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_empty_grid_rejected(self):
        ds = rct_dataset(n=5, m=2, seed=12)
        with pytest.raises(ValidationError):
            dpl_loss(random_preds(5, 2), ds, [])

    def test_default_grid_spans_ratio_range(self):
        preds = random_preds(8, 3, seed=13)
        grid = default_lambda_grid(preds, size=10)
        assert grid.size == 10 and grid[0] == 0.0
        assert grid[-1] == pytest.approx(np.max(preds.revenues / preds.costs))


class TestGradientTables:
    def test_hand_trace_two_treatment_instance(self):
        # one sample, treatment 0 received, slack budget so the multiplier is 0
        ds = Dataset(np.zeros((1, 1)), [0], [4.0], [0.5], 2, DataSource.RCT)
        preds = PredictionMatrix(np.array([[2.0, 1.0]]), np.array([[0.5, 0.5]]))
        table = pifd_gradient_table(preds, ds, BudgetSpec(total_budget=100.0))
        assert table.lambda_star == 0.0
        np.testing.assert_array_equal(table.dL_dz, [[-4.0, 4.0]])

    def test_zero_revenue_row_is_zero(self):
        ds = Dataset(np.zeros((2, 1)), [0, 1], [0.0, 1.0], [0.5, 0.5], 2, DataSource.RCT)
        preds = PredictionMatrix(np.array([[2.0, 1.0], [1.0, 2.0]]),
                                 np.full((2, 2), 0.5))
        table = pifd_gradient_table(preds, ds, BudgetSpec(total_budget=100.0))
        np.testing.assert_array_equal(table.dL_dz[0], [0.0, 0.0])

    def test_mismatching_entries_equal_magnitude_opposite_sign(self):
        ds = Dataset(np.zeros((1, 1)), [1], [3.0], [0.5], 3, DataSource.RCT)
        preds = PredictionMatrix(np.array([[5.0, 1.0, 2.0]]), np.full((1, 3), 0.5))
        table = pifd_gradient_table(preds, ds, BudgetSpec(total_budget=100.0))
        assert table.dL_dz[0, 1] == -table.dL_dz[0, 0]
        assert table.dL_dz[0, 2] == 0.0

    @pytest.mark.parametrize("seed", range(8))
    def test_pifd_matches_black_box_perturbation_3x2(self, seed):
        rng = np.random.default_rng(200 + seed)
        n, m = 3, 2
        t = rng.integers(0, m, n)
        ds = Dataset(np.zeros((n, 1)), t, rng.uniform(0.5, 2.0, n),
                     rng.uniform(0.1, 0.5, n), m, DataSource.RCT)
        preds = PredictionMatrix(rng.uniform(0.5, 2.5, (n, m)),
                                 rng.uniform(0.2, 1.0, (n, m)))
        budget = BudgetSpec(total_budget=float(rng.uniform(0.3, 1.2)) * n)
        table = pifd_gradient_table(preds, ds, budget)
        scores = preds.revenues - table.lambda_star * preds.costs
        oracle = black_box_decision_table(scores, ds.revenues, ds)
        mask = np.abs(oracle) > 0
        assert np.allclose(table.dL_dz[mask], oracle[mask], rtol=0.05)

    @pytest.mark.parametrize("seed", range(4))
    def test_difd_matches_black_box_perturbation(self, seed):
        rng = np.random.default_rng(300 + seed)
        n, m = 3, 2
        t = rng.integers(0, m, n)
        ds = Dataset(np.zeros((n, 1)), t, rng.uniform(0.5, 2.0, n),
                     rng.uniform(0.1, 0.5, n), m, DataSource.RCT)
        preds = PredictionMatrix(rng.uniform(0.5, 2.5, (n, m)),
                                 rng.uniform(0.2, 1.0, (n, m)))
        lam = float(rng.uniform(0.2, 1.5))
        table = difd_gradient_table(preds, ds, lam)
        scores = preds.revenues - lam * preds.costs
        oracle = black_box_decision_table(scores, ds.revenues - lam * ds.costs, ds)
        mask = np.abs(oracle) > 0
        assert np.allclose(table.dL_dz[mask], oracle[mask], rtol=0.05)

    def test_difd_payoff_reduces_to_pifd_payoff_when_costs_zero(self):
        n, m = 10, 3
        rng = np.random.default_rng(14)
        t = rng.integers(0, m, n)
        ds = Dataset(np.zeros((n, 1)), t, rng.uniform(1, 2, n), np.zeros(n), m,
                     DataSource.RCT)
        preds = random_preds(n, m, seed=15)
        lam = 0.9
        dual = difd_gradient_table(preds, ds, lam)
        # same multiplier, same payoff (costs are zero), so tables agree
        from dflift.losses import _ifd_table

        scores = preds.revenues - lam * preds.costs
        primal_style = _ifd_table(scores, ds.revenues, ds, 1e-6)
        np.testing.assert_allclose(dual.dL_dz, primal_style, rtol=1e-12)

    def test_zero_payoff_row_is_zero(self):
        lam = 2.0
        ds = Dataset(np.zeros((1, 1)), [0], [1.0], [0.5], 2, DataSource.RCT)
        preds = PredictionMatrix(np.array([[2.0, 1.0]]), np.full((1, 2), 0.5))
        table = difd_gradient_table(preds, ds, lam)  # payoff 1 - 2*0.5 = 0
        np.testing.assert_array_equal(table.dL_dz, np.zeros((1, 2)))


class TestPifdLoss:
    def test_zero_table_zero_loss_and_gradient(self):
        preds_np = random_preds(4, 2, seed=16)
        table = SurrogateGradientTable(np.zeros((4, 2)), 0.5)
        assert pifd_loss(preds_np, table) == 0.0

    def test_uniform_softmax_and_antisymmetric_table(self):
        preds = PredictionMatrix(np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]]))
        table = SurrogateGradientTable(np.array([[1.0, -1.0]]), 0.0)
        assert pifd_loss(preds, table) == pytest.approx(0.0, abs=1e-15)

    def test_difd_loss_sums_per_multiplier_terms(self):
        preds = random_preds(6, 2, seed=17)
        ds = rct_dataset(n=6, m=2, seed=18)
        tables = [difd_gradient_table(preds, ds, lam) for lam in (0.1, 0.7)]
        total = difd_loss(preds, tables)
        parts = sum(pifd_loss(preds, t) for t in tables)
        np.testing.assert_allclose(total, parts, rtol=1e-12)


class TestLossGradients:
    """Finite-difference checks for every differentiable loss."""

    @staticmethod
    def fd_check(loss_np, loss_t, x, tol=1e-4, h=1e-5):
        g = ad.gradient(loss_t, x)
        fd = np.zeros_like(x)
        for i in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (loss_np(xp) - loss_np(xm)) / (2 * h)
        assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) < tol

    @staticmethod
    def tensor_preds(x, n, m):
        mat = ad.reshape(x, (n, 2 * m))
        return PredictionMatrix(mat[:, :m], mat[:, m:])

    @staticmethod
    def np_preds(x, n, m):
        mat = x.reshape(n, 2 * m)
        return PredictionMatrix(mat[:, :m].copy(), mat[:, m:].copy())

    def test_prediction_loss_gradient(self):
        n, m = 8, 3
        ds = rct_dataset(n=n, m=m, seed=20)
        x = np.random.default_rng(21).uniform(0.3, 2.0, n * 2 * m)
        self.fd_check(lambda p: prediction_loss_rct(self.np_preds(p, n, m), ds),
                      lambda p: prediction_loss_rct(self.tensor_preds(p, n, m), ds), x)

    def test_parameterized_loss_gradient_in_both_blocks(self):
        n, m = 6, 3
        ds = rct_dataset(n=n, m=m, seed=22)
        teacher = random_preds(n, m, seed=23)
        rng = np.random.default_rng(24)
        gate_logits = rng.normal(size=(n, m))

        def combined_t(p):
            preds = self.tensor_preds(p[: n * 2 * m], n, m)
            w = ad.sigmoid(ad.add(ad.reshape(p[n * 2 * m:], (n, m)), gate_logits))
            return parameterized_prediction_loss(preds, teacher, BridgeGates(w, w), ds)

        def combined_np(p):
            preds = self.np_preds(p[: n * 2 * m], n, m)
            w = 1 / (1 + np.exp(-(p[n * 2 * m:].reshape(n, m) + gate_logits)))
            return parameterized_prediction_loss(preds, teacher, BridgeGates(w, w), ds)

        x = np.concatenate([rng.uniform(0.3, 2.0, n * 2 * m), rng.normal(size=n * m)])
        self.fd_check(combined_np, combined_t, x)

    def test_ppl_gradient(self):
        n, m = 8, 3
        ds = rct_dataset(n=n, m=m, seed=25)
        x = np.random.default_rng(26).uniform(0.3, 2.0, n * 2 * m)
        self.fd_check(lambda p: ppl_loss(self.np_preds(p, n, m), ds, 0.6, tau=0.8),
                      lambda p: ppl_loss(self.tensor_preds(p, n, m), ds, 0.6, tau=0.8), x)

    def test_pifd_gradient_with_frozen_table(self):
        n, m = 8, 3
        ds = rct_dataset(n=n, m=m, seed=27)
        rng = np.random.default_rng(28)
        x = rng.uniform(0.3, 2.0, n * 2 * m)
        table = pifd_gradient_table(self.np_preds(x, n, m), ds,
                                    BudgetSpec(total_budget=0.4 * n))
        self.fd_check(lambda p: pifd_loss(self.np_preds(p, n, m), table),
                      lambda p: pifd_loss(self.tensor_preds(p, n, m), table), x)

    def test_dpl_gradient(self):
        n, m = 8, 3
        ds = rct_dataset(n=n, m=m, seed=29)
        x = np.random.default_rng(30).uniform(0.3, 2.0, n * 2 * m)
        grid = [0.0, 0.5, 1.2]
        self.fd_check(lambda p: dpl_loss(self.np_preds(p, n, m), ds, grid, tau=1.0),
                      lambda p: dpl_loss(self.tensor_preds(p, n, m), ds, grid, tau=1.0), x)

    def test_frozen_table_blocks_gradient_flow(self):
        # perturbing table entries changes the value, but no gradient reaches
        # the preds that generated the table
        n, m = 5, 2
        ds = rct_dataset(n=n, m=m, seed=31)
        x = np.random.default_rng(32).uniform(0.3, 2.0, n * 2 * m)
        table = pifd_gradient_table(self.np_preds(x, n, m), ds,
                                    BudgetSpec(total_budget=0.4 * n))
        bumped = SurrogateGradientTable(table.dL_dz + 1.0, table.lambda_star)
        v0 = pifd_loss(self.np_preds(x, n, m), table)
        v1 = pifd_loss(self.np_preds(x, n, m), bumped)
        assert v0 != v1
        # gradient computed at the table-generating point only sees z'
        g_frozen = ad.gradient(lambda p: pifd_loss(self.tensor_preds(p, n, m), table), x)
        g_direct = ad.gradient(
            lambda p: pifd_loss(
                self.tensor_preds(p, n, m),
                SurrogateGradientTable(table.dL_dz.copy(), table.lambda_star),
            ),
            x,
        )
        np.testing.assert_array_equal(g_frozen, g_direct)
