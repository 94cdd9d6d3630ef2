"""
Computing a convex conjugate numerically
========================================

A BLNN evaluates ``argmax_y <y, x> - F(y)`` for a strongly convex ``F``.
On a quadratic the answer is a linear solve, which makes a good check of
every inner solver.
"""

import numpy as np

from blnn import lft

rng = np.random.default_rng(0)
A = rng.normal(size=(3, 3))
M = A @ A.T
beta = 2.0
F = lft.quadratic_objective(M, beta)
x = rng.normal(size=3)
exact = np.linalg.solve(M + np.eye(3) / beta, x)

# F is (1/beta)-strongly convex and gamma-smooth
print("mu", F.mu, "gamma", F.gamma)

for kind in lft.KINDS:
    policy = "inverse_smoothness" if kind == "gd" else None
    res = lft.solve_lft(F, x, lft.SolverConfig(kind=kind, step_policy=policy, max_iters=50_000))
    print(f"{kind:8s} iters {res.iters:6d}  error {np.linalg.norm(res.y_star - exact):.2e}")

# Plain GD with the decreasing step 1/(mu(t+1)) has a certified Lipschitz
# bound h(t) on the map x -> y_t(x). Early large steps inflate it when
# gamma >> mu; it then settles back toward 1/mu.
h = lft.gd_lipschitz_bounds(100_000, F.mu, F.gamma)
for t in (1, 5, 50, 5000, 100_000):
    print(f"h({t}) = {h[t]:.3f}")
print("1/mu =", 1 / F.mu)
