"""
Gradients without unrolling the solver
======================================

Parameter gradients come from the stationarity condition
``x = grad F(y*)``: one Hessian solve per sample, whatever solver found y*.
"""

import numpy as np

from blnn import convexnet as cn
from blnn import lft
from blnn import model as bm

rng = np.random.default_rng(0)
net = bm.make_blnn([2, 5, 5, 1], alpha=0.5, beta=2.0, seed=1)
solver = lft.SolverConfig(kind="newton", tol=1e-12)
X, C = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))

out, res = bm.blnn_forward(net, X, solver)
grads, grad_x = bm.blnn_backward(net, X, res.y_star, C, tol=solver.tol)
g = cn.flatten(grads)

# central differences on every parameter
theta = cn.flatten(net.core)
fd = np.zeros_like(theta)
for i in range(theta.size):
    e = np.zeros_like(theta)
    e[i] = 1e-6
    plus = bm.Blnn(cn.unflatten(net.core, theta + e), net.config)
    minus = bm.Blnn(cn.unflatten(net.core, theta - e), net.config)
    fd[i] = (np.sum(C * bm.blnn_forward(plus, X, solver)[0])
             - np.sum(C * bm.blnn_forward(minus, X, solver)[0])) / 2e-6
print("parameters:", theta.size, " max relative error:", np.abs(g - fd).max() / np.abs(fd).max())
