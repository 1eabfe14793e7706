"""Budgeted treatment assignment via Lagrangian relaxation.

Dualizing the budget turns the hard knapsack into per-individual argmax rules
``argmax_j (r_hat - lambda * c_hat)``; bisection on lambda matches spend to
budget. On tiny instances we can enumerate every assignment and measure the
relaxation's optimality gap directly.
"""
import numpy as np

from dflift import BudgetSpec, PredictionMatrix, brute_force_mckp, dual_assignment, solve_allocation

rng = np.random.default_rng(0)
n, m = 8, 3
revenue = rng.uniform(0.5, 2.0, (n, m))
cost = np.sort(rng.uniform(0.02, 1.0, (n, m)), axis=1)   # pricier treatments cost more
preds = PredictionMatrix(revenue, cost)
# a budget between the cheapest and the priciest full assignment
budget = BudgetSpec(total_budget=float(cost[:, 0].sum() + 0.15 * (cost[:, -1].sum() - cost[:, 0].sum())))

sol = solve_allocation(preds, None, budget)
value = float(np.sum(sol.assignment * revenue))
spend = float(np.sum(sol.assignment * cost))
print(f"lagrangian solve: lambda*={sol.lambda_star:.4f} value={value:.3f} "
      f"spend={spend:.3f} (budget {budget.total_budget:.3f})")

z_opt, opt = brute_force_mckp(revenue, cost, budget.total_budget)
rho = 1 - revenue.max() / opt
print(f"enumeration optimum: {opt:.3f}; guarantee floor {rho:.3f} x OPT = {rho*opt:.3f}")
print(f"relaxation meets the guarantee: {value >= rho * opt}")

# spend falls monotonically as the multiplier rises
print("\nlambda -> per-capita predicted spend:")
for lam in np.linspace(0, 3, 7):
    z = dual_assignment(preds, lam)
    print(f"  lambda={lam:4.1f}  spend={np.sum(z * cost) / n:.4f}")
