"""The (alpha, beta) bi-Lipschitz network and its implicit backward pass.

A model holds an ICNN ``G`` and two constants. Its output is

    f(x) = argmax_y { <y, x> - G(y) - ||y||^2 / (2 beta) } + alpha x,

the gradient of an ``alpha``-strongly convex, ``(alpha + beta)``-smooth
potential, hence ``(alpha, alpha + beta)``-bi-Lipschitz. The argmax ``y*`` is
found by ``lft.solve_lft``; gradients come from the stationarity condition
``x = grad G(y*) + y* / beta`` rather than from the solver iterations.

Weighted mode replaces ``alpha`` and ``1/beta`` by per-coordinate diagonals:
the quadratic term becomes ``y^T diag(b^-2) y / 2`` and the skip term
``diag(a^2) x``.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import convexnet as cn
from .lft import ConvexObjective, LftResult, SolverConfig, solve_lft

DEFAULT_SOLVER = SolverConfig(kind="newton", tol=1e-8, max_iters=200)
BACKWARD_RESIDUAL_FACTOR = 100.0


class NotStationaryError(RuntimeError):
    """The point handed to a backward pass is too far from the argmax."""


@dataclass
class BlnnConfig:
    alpha: float = 0.0
    beta: float = 1.0
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if (self.a is None) != (self.b is None):
            raise ValueError("weighted mode needs both a and b")
        if self.a is not None:
            self.a = np.asarray(self.a, dtype=np.float64)
            self.b = np.asarray(self.b, dtype=np.float64)
            if self.a.shape != self.b.shape or self.a.ndim != 1:
                raise ValueError("a and b must be vectors of equal length")
            if np.any(self.a < 0) or np.any(self.b <= 0):
                raise ValueError("need a >= 0 and b > 0")

    @property
    def weighted(self) -> bool:
        return self.a is not None

    def quad_diag(self, d) -> np.ndarray:
        """Diagonal of the Hessian of the quadratic regularizer."""
        if self.weighted:
            return self.b ** -2.0
        return np.full(d, 1.0 / self.beta)

    def skip_diag(self, d) -> np.ndarray:
        if self.weighted:
            return self.a ** 2
        return np.full(d, float(self.alpha))

    @property
    def lower(self) -> float:
        """Inverse Lipschitz constant of the map (``min a^2`` when weighted)."""
        if self.weighted:
            return float(np.min(self.a ** 2))
        return float(self.alpha)

    @property
    def upper(self) -> float:
        """Lipschitz constant of the map."""
        if self.weighted:
            return float(np.max(self.a ** 2 + self.b ** 2))
        return float(self.alpha + self.beta)

    def to_dict(self) -> dict:
        doc = {"alpha": float(self.alpha), "beta": float(self.beta)}
        if self.weighted:
            doc["weighted"] = {"a": self.a.tolist(), "b": self.b.tolist()}
        return doc

    @classmethod
    def from_dict(cls, doc) -> "BlnnConfig":
        w = doc.get("weighted")
        if w:
            return cls(doc.get("alpha", 0.0), doc.get("beta", 1.0), w["a"], w["b"])
        return cls(doc["alpha"], doc["beta"])


@dataclass
class Blnn:
    core: cn.IcnnParams
    config: BlnnConfig

    @property
    def dim(self) -> int:
        return self.core.input_dim


def zero_core(d: int, activation="softplus") -> cn.IcnnParams:
    """An ICNN that is identically zero."""
    return cn.IcnnParams([cn.IcnnLayer(np.zeros((1, d)), np.zeros(1))], activation)


def make_blnn(dims, alpha, beta, activation="softplus", scheme=cn.InitScheme(), seed=0) -> Blnn:
    return Blnn(cn.init_params(dims, activation, scheme, seed), BlnnConfig(alpha, beta))


# ---------------------------------------------------------------------------
# objective


class BlnnObjective(ConvexObjective):
    """``F(y) = G(y) + y^T Q y / 2`` with ``Q = I/beta`` or ``diag(b^-2)``."""

    def __init__(self, model: Blnn, gamma=None):
        q = model.config.quad_diag(model.dim)
        super().__init__(self._value_impl, self._grad_impl,
                         self._hessian_impl if model.core.activation == "softplus" else None,
                         mu=float(np.min(q)), gamma=gamma, dim=model.dim)
        self.model = model
        self.q = q

    def _value_impl(self, Y):
        return cn.icnn_forward(self.model.core, Y) + 0.5 * np.einsum("nd,d,nd->n", Y, self.q, Y)

    def _grad_impl(self, Y):
        return cn.icnn_grad(self.model.core, Y) + Y * self.q

    def _hessian_impl(self, Y):
        H = cn.icnn_hessian(self.model.core, Y)
        idx = np.arange(self.dim)
        H[:, idx, idx] += self.q
        return H

    def grad_hessian(self, Y, need_hessian, rows=None):
        if not need_hessian:
            return self._grad_impl(Y), None
        _, g, H = cn.icnn_value_grad_hessian(self.model.core, Y)
        idx = np.arange(self.dim)
        H[:, idx, idx] += self.q
        return g + Y * self.q, H


def strongly_convex_objective(model: Blnn, gamma=None) -> BlnnObjective:
    return BlnnObjective(model, gamma)


# ---------------------------------------------------------------------------
# warm starts


class WarmCache:
    """Last converged argmax per sample, reused as the next initial point.

    Lookups go by sample key first; inputs without a key (or with an unseen
    key) fall back to the nearest stored input within ``radius``, and
    otherwise start from zero. Inserts are serialized by a lock.
    """

    def __init__(self, dim: int, radius: float = 1e-6):
        self.dim = dim
        self.radius = radius
        self._by_key = {}
        self._xs = []
        self._ys = []
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._by_key) + len(self._xs)

    def lookup(self, X, keys=None) -> np.ndarray:
        X = np.atleast_2d(X)
        Y0 = np.zeros_like(X)
        with self._lock:
            by_key = dict(self._by_key)
            xs = np.array(self._xs) if self._xs else None
            ys = np.array(self._ys) if self._ys else None
        for i in range(len(X)):
            if keys is not None and keys[i] in by_key:
                Y0[i] = by_key[keys[i]]
            elif xs is not None:
                dist = np.linalg.norm(xs - X[i], axis=1)
                j = int(np.argmin(dist))
                if dist[j] <= self.radius:
                    Y0[i] = ys[j]
        return Y0

    def insert(self, X, Y, keys=None, mask=None) -> None:
        X = np.atleast_2d(X)
        Y = np.atleast_2d(Y)
        if Y.shape[1] != self.dim:
            raise ValueError("cache entries must match the model dimension")
        with self._lock:
            for i in range(len(X)):
                if mask is not None and not mask[i]:
                    continue
                if not np.all(np.isfinite(Y[i])):
                    continue
                if keys is not None:
                    self._by_key[keys[i]] = Y[i].copy()
                else:
                    self._xs.append(X[i].copy())
                    self._ys.append(Y[i].copy())


# ---------------------------------------------------------------------------
# forward and backward


def _batch(x, d):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"input has shape {x.shape}, expected (..., {d})")
    return X, single


def blnn_forward(model: Blnn, x, solver: Optional[SolverConfig] = None,
                 cache: Optional[WarmCache] = None, keys=None, y0=None, objective=None):
    """Evaluate the model. Returns ``(output, LftResult)``.

    ``y0`` overrides the initial point; otherwise the cache (if any) supplies
    it. Converged solutions are written back to the cache.
    """
    if solver is None:
        solver = DEFAULT_SOLVER
    X, single = _batch(x, model.dim)
    if objective is None:
        objective = strongly_convex_objective(model)
    if y0 is None and cache is not None:
        y0 = cache.lookup(X, keys)
    res = solve_lft(objective, X, solver, y0)
    out = res.y_star + X * model.config.skip_diag(model.dim)
    if cache is not None:
        cache.insert(X, res.y_star, keys, res.converged)
    if single:
        res = LftResult(res.y_star[0], int(res.iters[0]), float(res.residual[0]),
                        bool(res.converged[0]))
        return out[0], res
    return out, res


def _check_stationary(model, X, Y, tol):
    if tol is None:
        return
    r = np.linalg.norm(X - strongly_convex_objective(model).grad(Y), axis=1)
    worst = float(np.max(r))
    if worst > BACKWARD_RESIDUAL_FACTOR * tol:
        raise NotStationaryError(
            f"residual {worst:.3g} exceeds {BACKWARD_RESIDUAL_FACTOR:g} x tol ({tol:g}); "
            "implicit gradients would be wrong")


def _hessian_solve(model: Blnn, Y, G):
    obj = strongly_convex_objective(model)
    _, H = obj.grad_hessian(Y, True)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(H)
        raise np.linalg.LinAlgError(
            f"Hessian not positive definite (condition estimate {np.max(cond):.3g})") from exc
    z = np.linalg.solve(L, G[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), z)[..., 0]


def blnn_backward(model: Blnn, x, y_star, grad_out, tol=None):
    """Parameter gradients and input gradient for upstream ``grad_out``.

    Returns ``(param_grads, grad_x)``. Parameter gradients are summed over the
    batch. ``tol`` enables the stationarity guard: residuals above
    ``100 * tol`` raise ``NotStationaryError``.
    """
    d = model.dim
    X, single = _batch(x, d)
    Y, _ = _batch(y_star, d)
    G, _ = _batch(grad_out, d)
    _check_stationary(model, X, Y, tol)
    V = _hessian_solve(model, Y, G)
    pg = cn.icnn_param_vjp_of_grad(model.core, Y, V)
    for a in pg.arrays():
        a *= -1.0
    gx = V + G * model.config.skip_diag(d)
    return pg, (gx[0] if single else gx)


def blnn_backward_params(model: Blnn, x, y_star, grad_out, tol=None) -> cn.IcnnParams:
    """Gradient of the loss with respect to the ICNN parameters."""
    return blnn_backward(model, x, y_star, grad_out, tol)[0]


def blnn_input_vjp(model: Blnn, y_star, grad_out):
    """``grad_out^T (H^-1 + alpha I)`` where ``H`` is the Hessian of ``F`` at ``y_star``."""
    d = model.dim
    Y, single = _batch(y_star, d)
    G, _ = _batch(grad_out, d)
    out = _hessian_solve(model, Y, G) + G * model.config.skip_diag(d)
    return out[0] if single else out


def input_jacobian(model: Blnn, y_star) -> np.ndarray:
    """Jacobian ``H^-1 + diag(skip)`` of the model at a solved point."""
    d = model.dim
    Y, single = _batch(y_star, d)
    _, H = strongly_convex_objective(model).grad_hessian(Y, True)
    J = np.linalg.inv(H) + np.diag(model.config.skip_diag(d))
    return J[0] if single else J


# ---------------------------------------------------------------------------
# composite model


def make_projector(d2: int, d1: int) -> np.ndarray:
    """``d2 x d1`` matrix with ones on the main diagonal."""
    return np.eye(d2, d1)


@dataclass
class CompositeBlnn:
    """``f2(D f1(x))`` with a rectangular diagonal projector ``D``."""

    first: Blnn
    second: Blnn
    projector: np.ndarray = None

    def __post_init__(self):
        d1, d2 = self.first.dim, self.second.dim
        if self.projector is None:
            self.projector = make_projector(d2, d1)
        P = np.asarray(self.projector, dtype=np.float64)
        if P.shape != (d2, d1) or not np.array_equal(P, make_projector(d2, d1)):
            raise ValueError("projector must be the d2 x d1 matrix with unit diagonal")
        self.projector = P

    @property
    def dim(self) -> int:
        return self.first.dim

    @property
    def out_dim(self) -> int:
        return self.second.dim


@dataclass
class CompositeTape:
    x: np.ndarray
    y1: np.ndarray
    w: np.ndarray
    y2: np.ndarray
    lft1: LftResult
    lft2: LftResult


def composite_forward(model: CompositeBlnn, x, solver=None, caches=(None, None), keys=None):
    """Returns ``(output, tape)``; the tape feeds ``composite_backward``."""
    X, single = _batch(x, model.dim)
    f1, r1 = blnn_forward(model.first, X, solver, caches[0], keys)
    w = f1 @ model.projector.T
    f2, r2 = blnn_forward(model.second, w, solver, caches[1], keys)
    tape = CompositeTape(X, r1.y_star, w, r2.y_star, r1, r2)
    return (f2[0] if single else f2), tape


def composite_backward(model: CompositeBlnn, tape: CompositeTape, grad_out, tol=None):
    """Returns ``(grads_first, grads_second, grad_x)``."""
    G = np.atleast_2d(grad_out)
    g2, gw = blnn_backward(model.second, tape.w, tape.y2, G, tol)
    gf1 = np.atleast_2d(gw) @ model.projector
    g1, gx = blnn_backward(model.first, tape.x, tape.y1, gf1, tol)
    return g1, g2, gx


# ---------------------------------------------------------------------------
# partially bi-Lipschitz model


@dataclass
class Pblnn:
    """Bi-Lipschitz in a convex block ``y``, free in a side input ``x``."""

    core: cn.PicnnParams
    config: BlnnConfig

    @property
    def convex_dim(self) -> int:
        return self.core.convex_dim

    @property
    def nonconvex_dim(self) -> int:
        return self.core.nonconvex_dim


class PicnnObjective(ConvexObjective):
    """``F(y) = G(x_n, y) + y^T Q y / 2`` with one side input per batch row."""

    def __init__(self, model: Pblnn, X):
        q = model.config.quad_diag(model.convex_dim)
        super().__init__(None, None, None, mu=float(np.min(q)), dim=model.convex_dim)
        self.model = model
        self.X = X
        self.q = q

    def _side(self, rows, n):
        return self.X if rows is None else self.X[rows]

    def value(self, Y, rows=None):
        Xs = self._side(rows, len(Y))
        return cn.picnn_forward(self.model.core, Xs, Y) + 0.5 * np.einsum("nd,d,nd->n", Y, self.q, Y)

    def grad(self, Y, rows=None):
        return cn.picnn_grad_y(self.model.core, self._side(rows, len(Y)), Y) + Y * self.q

    def hessian(self, Y, rows=None):
        H = cn.picnn_hessian_y(self.model.core, self._side(rows, len(Y)), Y)
        idx = np.arange(self.dim)
        H[:, idx, idx] += self.q
        return H

    @property
    def has_hessian(self):
        return True


def pblnn_forward(model: Pblnn, x_nonconvex, y_input, solver=None, cache=None, keys=None):
    """Returns ``(output, LftResult)`` with ``output = [x_nonconvex, y* + alpha y_input]``."""
    if solver is None:
        solver = DEFAULT_SOLVER
    Xn, single = _batch(x_nonconvex, model.nonconvex_dim)
    Yi, _ = _batch(y_input, model.convex_dim)
    y0 = None
    if cache is not None:
        y0 = cache.lookup(np.hstack([Xn, Yi]), keys)
    res = solve_lft(PicnnObjective(model, Xn), Yi, solver, y0)
    z = res.y_star + Yi * model.config.skip_diag(model.convex_dim)
    if cache is not None:
        cache.insert(np.hstack([Xn, Yi]), res.y_star, keys, res.converged)
    out = np.hstack([Xn, z])
    if single:
        res = LftResult(res.y_star[0], int(res.iters[0]), float(res.residual[0]),
                        bool(res.converged[0]))
        return out[0], res
    return out, res


def pblnn_backward(model: Pblnn, x_nonconvex, y_input, y_star, grad_out, tol=None):
    """Returns ``(param_grads, grad_x_nonconvex, grad_y_input)``.

    ``grad_out`` is the upstream gradient for the full output
    ``[x_nonconvex, z]``.
    """
    dn, dc = model.nonconvex_dim, model.convex_dim
    Xn, single = _batch(x_nonconvex, dn)
    Yi, _ = _batch(y_input, dc)
    Ys, _ = _batch(y_star, dc)
    G, _ = _batch(grad_out, dn + dc)
    g_nc, g_z = G[:, :dn], G[:, dn:]
    obj = PicnnObjective(model, Xn)
    if tol is not None:
        worst = float(np.max(np.linalg.norm(Yi - obj.grad(Ys), axis=1)))
        if worst > BACKWARD_RESIDUAL_FACTOR * tol:
            raise NotStationaryError(f"residual {worst:.3g} exceeds {BACKWARD_RESIDUAL_FACTOR:g} x tol")
    H = obj.hessian(Ys)
    L = np.linalg.cholesky(H)
    V = np.linalg.solve(np.swapaxes(L, -1, -2), np.linalg.solve(L, g_z[..., None]))[..., 0]
    pg = cn.picnn_param_vjp_of_grad_y(model.core, Xn, Ys, V)
    for a in pg.arrays():
        a *= -1.0
    gx = g_nc - cn.picnn_grad_x_vjp(model.core, Xn, Ys, V)
    gy = V + g_z * model.config.skip_diag(dc)
    if single:
        return pg, gx[0], gy[0]
    return pg, gx, gy


# ---------------------------------------------------------------------------
# bundles


def model_to_dict(model: Blnn, solver: Optional[SolverConfig] = None) -> dict:
    return {"config": model.config.to_dict(),
            "core": cn.icnn_to_dict(model.core),
            "solver_defaults": (solver or DEFAULT_SOLVER).to_dict()}


def model_from_dict(doc) -> tuple:
    """Returns ``(Blnn, SolverConfig)``."""
    model = Blnn(cn.icnn_from_dict(doc["core"]), BlnnConfig.from_dict(doc["config"]))
    solver = SolverConfig.from_dict(doc["solver_defaults"]) if "solver_defaults" in doc else DEFAULT_SOLVER
    return model, solver


def save_model(model: Blnn, path, solver=None) -> None:
    with open(path, "w") as fh:
        fh.write(cn.dumps_json(model_to_dict(model, solver)))


def load_model(path) -> tuple:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
