"""
A bi-Lipschitz network and its certified constants
==================================================

``f(x) = argmax_y {<y, x> - G(y) - |y|^2 / (2 beta)} + alpha x`` with an
input convex ``G`` is (alpha, alpha + beta)-bi-Lipschitz whatever the
weights are. We check it on random networks.
"""

import numpy as np

from blnn import model as bm
from blnn.estimator import estimate_bilip

alpha, beta = 1.0, 4.0
net = bm.make_blnn([2, 16, 16, 1], alpha, beta, seed=3)


def f(X):
    return bm.blnn_forward(net, X)[0]


est = estimate_bilip(f, -3.0, 3.0, n_samples=500, dim=2, seed=0)
print(f"pair ratios lie in [{est.invlip_hat:.4f}, {est.lip_hat:.4f}], certified [{alpha}, {alpha + beta}]")

# The Jacobian is H^-1 + alpha I with H the Hessian of the convex objective,
# so its eigenvalues sit in the same interval.
X = np.random.default_rng(1).uniform(-3, 3, size=(200, 2))
_, res = bm.blnn_forward(net, X)
eig = np.linalg.eigvalsh(bm.input_jacobian(net, res.y_star))
print("Jacobian eigenvalues in", eig.min(), eig.max())

# With alpha = 0 the map is the gradient of the conjugate, so it inverts
# the gradient of G + |y|^2/(2 beta).
net0 = bm.make_blnn([2, 16, 16, 1], 0.0, beta, seed=3)
y, _ = bm.blnn_forward(net0, X)
back = bm.strongly_convex_objective(net0).grad(y)
print("round trip error", np.abs(back - X).max())
