"""Solve a small transport problem and compare it with the LP vertex."""

import numpy as np

from sparsefuse.fusion import ipot_solve

cost = np.array([[0.0, 1.0], [1.0, 0.0]])
uniform = np.full(2, 0.5)
for iters in (5, 20, 50):
    plan = ipot_solve(cost, uniform, uniform, iters=iters).plan
    print(f"{iters:3d} iterations: cost {float((plan * cost).sum()):.2e}")
    print(np.round(plan, 4))

rng = np.random.default_rng(0)
cost = rng.uniform(0, 20, (4, 6))
plan = ipot_solve(cost, np.full(4, 0.25), np.full(6, 1 / 6)).plan
print("row sums", np.round(plan.sum(1), 6))
print("column sums", np.round(plan.sum(0), 6))
print("row-normalised plan\n", np.round(plan / plan.sum(1, keepdims=True), 3))
