"""
Certified constants for a truncated solver
==========================================

Running only t steps of gradient descent still gives a Lipschitz map
``x -> y_t(x)``, with constant at most h(t). The bound needs the smoothness
gamma along the iterate paths; we measure it from the Hessian there.
"""

from blnn import experiments as ex

worst, records = ex.certify_gd(n_objectives=5, t_max=100, seed=0)
for r in records:
    print(f"beta {r['beta']:.2f}  gamma_hat {r['gamma_hat']:.3f}  max lip_hat(t)/h(t) {r['max_ratio_to_bound']:.6f}")
print("worst ratio", worst)
