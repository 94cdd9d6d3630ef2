"""Solvers for the Legendre-Fenchel argmax and iterate bounds.

For a strongly convex ``F`` the conjugate argmax

    y*(x) = argmax_y <y, x> - F(y)

is the unique root of ``x - grad F(y)``. ``solve_lft`` finds it with one of
six first/second order schemes and stops on the stationarity residual
``||x - grad F(y)||``. Batches of inputs are solved together; rows that have
converged are frozen and no longer evaluated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

KINDS = ("gd", "agd", "newton", "adagrad", "rmsprop", "adam")
POLICIES = ("decreasing", "inverse_smoothness", "fixed")
DIVERGENCE_NORM = 1e12

_DEFAULT_POLICY = {
    "gd": "decreasing",
    "agd": "inverse_smoothness",
    "newton": "fixed",
    "adagrad": "fixed",
    "rmsprop": "decreasing",
    "adam": "decreasing",
}


class LftDivergenceError(RuntimeError):
    def __init__(self, iteration, message="non-finite or exploding iterate"):
        super().__init__(f"LFT solve diverged at iteration {iteration}: {message}")
        self.iteration = iteration


class ConvexObjective:
    """A strongly convex function exposed through batched callables.

    ``value``, ``grad`` and ``hessian`` take an ``(n, d)`` array and return
    ``(n,)``, ``(n, d)`` and ``(n, d, d)`` arrays. ``gamma`` may be None when
    the smoothness constant is unknown.
    """

    def __init__(self, value: Callable, grad: Callable, hessian: Optional[Callable] = None,
                 mu: float = 1.0, gamma: Optional[float] = None, dim: Optional[int] = None):
        if mu <= 0:
            raise ValueError("strong convexity constant must be positive")
        self._value = value
        self._grad = grad
        self._hessian = hessian
        self.mu = float(mu)
        self.gamma = None if gamma is None else float(gamma)
        self.dim = dim

    def value(self, Y, rows=None):
        return self._value(Y)

    def grad(self, Y, rows=None):
        return self._grad(Y)

    def hessian(self, Y, rows=None):
        if self._hessian is None:
            raise ValueError("this objective has no Hessian")
        return self._hessian(Y)

    @property
    def has_hessian(self) -> bool:
        return self._hessian is not None

    def grad_hessian(self, Y, need_hessian, rows=None):
        """Gradient and optional Hessian.

        ``rows`` holds the batch indices of ``Y`` for objectives that differ
        per sample (for example when conditioned on a side input).
        """
        return self.grad(Y, rows), (self.hessian(Y, rows) if need_hessian else None)


def quadratic_objective(M, beta) -> ConvexObjective:
    """``F(y) = y^T M y / 2 + ||y||^2 / (2 beta)`` for a PSD matrix ``M``."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    A = 0.5 * (M + M.T) + np.eye(M.shape[0]) / beta
    eig = np.linalg.eigvalsh(A)
    return ConvexObjective(
        value=lambda Y: 0.5 * np.einsum("ni,ij,nj->n", Y, A, Y),
        grad=lambda Y: Y @ A,
        hessian=lambda Y: np.broadcast_to(A, (Y.shape[0],) + A.shape).copy(),
        mu=eig[0], gamma=eig[-1], dim=A.shape[0])


def estimate_smoothness(objective: ConvexObjective, lo, hi, n_pairs=1000, seed=0) -> float:
    """Largest gradient-difference ratio over random pairs drawn from a box."""
    rng = np.random.default_rng(seed)
    d = objective.dim or np.size(lo)
    a = rng.uniform(lo, hi, size=(n_pairs, d))
    b = rng.uniform(lo, hi, size=(n_pairs, d))
    num = np.linalg.norm(objective.grad(a) - objective.grad(b), axis=1)
    den = np.linalg.norm(a - b, axis=1)
    ok = den > 1e-12
    return float(np.max(num[ok] / den[ok]))


@dataclass
class SolverConfig:
    """Inner solver settings.

    ``step_policy=None`` picks the per-kind default: decreasing ``1/(mu(t+1))``
    for gd, rmsprop and adam, ``1/gamma`` for agd, fixed ``1/mu`` for adagrad
    and fixed 1 for Newton. ``eta`` is the fixed step when the policy is
    ``"fixed"`` (None means the kind default).
    """

    kind: str = "gd"
    step_policy: Optional[str] = None
    eta: Optional[float] = None
    max_iters: int = 1000
    tol: float = 1e-3
    adagrad_eps: float = 1e-10
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    newton_backtrack: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown solver kind {self.kind!r}")
        if self.step_policy is None:
            self.step_policy = _DEFAULT_POLICY[self.kind]
        if self.step_policy not in POLICIES:
            raise ValueError(f"unknown step policy {self.step_policy!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc) -> "SolverConfig":
        doc = dict(doc)
        if "adam_betas" in doc:
            doc["adam_betas"] = tuple(doc["adam_betas"])
        return cls(**doc)


def step_size(config: SolverConfig, t: int, mu: float, gamma: Optional[float]) -> float:
    policy = config.step_policy
    if policy == "decreasing":
        return 1.0 / (mu * (t + 1))
    if policy == "inverse_smoothness":
        if gamma is None:
            raise ValueError("the 1/gamma step needs a smoothness constant")
        return 1.0 / gamma
    if config.eta is not None:
        return float(config.eta)
    if config.kind == "adagrad":
        return 1.0 / mu
    if config.kind == "newton":
        return 1.0
    raise ValueError(f"fixed step policy for {config.kind} needs eta")


@dataclass
class SolverState:
    """Iterate and optimizer accumulators for a batch of solves.

    ``y`` is the current iterate; ``w`` the look-ahead point for AGD (equal to
    ``y`` for other kinds). Gradients must be evaluated at ``query``.
    """

    kind: str
    y: np.ndarray
    t: int = 0
    w: Optional[np.ndarray] = None
    acc1: Optional[np.ndarray] = None
    acc2: Optional[np.ndarray] = None

    @property
    def query(self) -> np.ndarray:
        return self.y if self.w is None else self.w

    @classmethod
    def init(cls, kind, y0):
        y0 = np.array(y0, dtype=np.float64)
        st = cls(kind, y0)
        if kind == "agd":
            st.w = y0.copy()
        if kind in ("adagrad", "rmsprop", "adam"):
            st.acc2 = np.zeros_like(y0)
        if kind == "adam":
            st.acc1 = np.zeros_like(y0)
        return st

    def take(self, rows) -> "SolverState":
        sub = lambda a: None if a is None else a[rows]
        return SolverState(self.kind, self.y[rows], self.t, sub(self.w),
                           sub(self.acc1), sub(self.acc2))

    def put(self, rows, other: "SolverState") -> None:
        self.y[rows] = other.y
        for name in ("w", "acc1", "acc2"):
            a = getattr(self, name)
            if a is not None:
                a[rows] = getattr(other, name)


def solver_step(kind: str, state: SolverState, grad, hessian=None,
                config: Optional[SolverConfig] = None, mu: float = 1.0,
                gamma: Optional[float] = None, eta: Optional[float] = None) -> SolverState:
    """One ascent update on ``<y, x> - F(y)``.

    ``grad`` is the gradient of the concave objective, ``x - grad F``, at
    ``state.query``. For Newton, ``hessian`` is ``grad^2 F`` there. The
    state is updated in place and returned. ``eta`` overrides the policy step.
    """
    if config is None:
        config = SolverConfig(kind=kind)
    if kind == "newton" and hessian is None:
        raise ValueError("the Newton step needs the Hessian")
    g = np.asarray(grad, dtype=np.float64)
    lr = step_size(config, state.t, mu, gamma) if eta is None else eta
    if kind == "gd":
        state.y = state.y + lr * g
    elif kind == "newton":
        state.y = state.y + lr * newton_direction(hessian, g)
    elif kind == "agd":
        if gamma is None:
            raise ValueError("AGD needs a smoothness constant")
        q = mu / gamma
        m = (1.0 - np.sqrt(q)) / (1.0 + np.sqrt(q))
        y_new = state.w + lr * g
        state.w = y_new + m * (y_new - state.y)
        state.y = y_new
    elif kind == "adagrad":
        state.acc2 = state.acc2 + g * g
        state.y = state.y + lr * g / (np.sqrt(state.acc2) + config.adagrad_eps)
    elif kind == "rmsprop":
        r = config.rmsprop_decay
        state.acc2 = r * state.acc2 + (1 - r) * g * g
        state.y = state.y + lr * g / (np.sqrt(state.acc2) + config.rmsprop_eps)
    elif kind == "adam":
        b1, b2 = config.adam_betas
        state.acc1 = b1 * state.acc1 + (1 - b1) * g
        state.acc2 = b2 * state.acc2 + (1 - b2) * g * g
        k = state.t + 1
        mhat = state.acc1 / (1 - b1 ** k)
        vhat = state.acc2 / (1 - b2 ** k)
        state.y = state.y + lr * mhat / (np.sqrt(vhat) + config.adam_eps)
    else:
        raise ValueError(f"unknown solver kind {kind!r}")
    state.t += 1
    return state


def newton_direction(H, g):
    """Solve ``H d = g`` through a Cholesky factor (batched or single)."""
    H = np.asarray(H)
    g = np.asarray(g)
    single = g.ndim == 1
    if single:
        H, g = H[None], g[None]
    L = np.linalg.cholesky(H)
    z = np.linalg.solve(L, g[..., None])
    d = np.linalg.solve(np.swapaxes(L, -1, -2), z)[..., 0]
    return d[0] if single else d


@dataclass
class LftResult:
    """Outcome of a (possibly batched) conjugate solve.

    For batched solves ``iters``, ``residual`` and ``converged`` are arrays.
    """

    y_star: np.ndarray
    iters: object
    residual: object
    converged: object

    def __len__(self):
        return 1 if np.ndim(self.y_star) == 1 else len(self.y_star)


class _Trace:
    def __init__(self, path):
        self.path = path
        self.rows = []

    def add(self, it, residual, value):
        self.rows.append((it, residual, value))

    def write(self):
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "residual", "objective_value"])
            for it, r, v in self.rows:
                w.writerow([it, format(r, ".17g"), format(v, ".17g")])


def _check_finite(Y, it):
    if not np.all(np.isfinite(Y)):
        raise LftDivergenceError(it)
    if Y.size and np.max(np.linalg.norm(Y, axis=-1)) > DIVERGENCE_NORM:
        raise LftDivergenceError(it, f"iterate norm above {DIVERGENCE_NORM:g}")


def solve_lft(objective: ConvexObjective, x, config: Optional[SolverConfig] = None,
              y0=None, trace_path=None, callback=None) -> LftResult:
    """Maximize ``<y, x> - F(y)`` for one input ``(d,)`` or a batch ``(n, d)``.

    The residual ``||x - grad F(y)||`` is checked before each step, so a start
    at the optimum returns with zero iterations. ``callback(t, Y)`` receives
    the full batch of query points after every step (frozen rows included);
    it is meant for iterate studies. ``trace_path`` writes a CSV with the
    largest residual and the mean objective value per iteration.
    """
    if config is None:
        config = SolverConfig()
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    n, d = X.shape
    if y0 is None:
        Y0 = np.zeros_like(X)
    else:
        Y0 = np.array(np.broadcast_to(np.asarray(y0, dtype=np.float64), X.shape))
    _check_finite(Y0, 0)

    mu, gamma = objective.mu, objective.gamma
    kind = config.kind
    need_h = kind == "newton"
    state = SolverState.init(kind, Y0)
    iters = np.zeros(n, dtype=np.int64)
    resid = np.full(n, np.inf)
    active = np.arange(n)
    trace = _Trace(trace_path) if trace_path is not None else None

    grad_F, hess = objective.grad_hessian(state.query, need_h, active)
    for t in range(config.max_iters + 1):
        Xa = X[active]
        g = Xa - grad_F
        r = np.linalg.norm(g, axis=1)
        resid[active] = r
        if trace is not None:
            q = state.query
            vals = np.einsum("nd,nd->n", q, X) - objective.value(q, np.arange(n))
            trace.add(t, float(np.max(resid)), float(np.mean(vals)))
        done = r <= config.tol
        if t == config.max_iters or np.all(done):
            break
        keep = ~done
        if not np.all(keep):
            active = active[keep]
            g = g[keep]
            Xa = Xa[keep]
            r = r[keep]
            hess = None if hess is None else hess[keep]
        sub = state.take(active)
        sub.t = t
        if kind == "newton":
            direction = newton_direction(hess, g)
            lr = np.full(len(active), step_size(config, t, mu, gamma))
            y_try = sub.y + lr[:, None] * direction
            grad_F, hess = objective.grad_hessian(y_try, True, active)
            if config.newton_backtrack:
                # halve until the residual does not increase
                for _ in range(40):
                    r_new = np.linalg.norm(Xa - grad_F, axis=1)
                    bad = ~(r_new <= r)
                    if not np.any(bad):
                        break
                    lr[bad] *= 0.5
                    y_try[bad] = sub.y[bad] + lr[bad, None] * direction[bad]
                    gb, hb = objective.grad_hessian(y_try[bad], True, active[bad])
                    grad_F[bad] = gb
                    hess[bad] = hb
            sub.y = y_try
            sub.t += 1
        else:
            solver_step(kind, sub, g, config=config, mu=mu, gamma=gamma)
        _check_finite(sub.query, t + 1)
        state.put(active, sub)
        state.t = t + 1
        iters[active] += 1
        if callback is not None:
            callback(t + 1, state.query)
        if kind != "newton":
            grad_F, hess = objective.grad_hessian(sub.query, need_h, active)
    if trace is not None:
        trace.write()

    Y = state.query
    conv = resid <= config.tol
    if single:
        return LftResult(Y[0], int(iters[0]), float(resid[0]), bool(conv[0]))
    return LftResult(Y, iters, resid, conv)


# ---------------------------------------------------------------------------
# iterate bounds


def _check_mu_gamma(mu, gamma):
    if not (0 < mu <= gamma):
        raise ValueError(f"need 0 < mu <= gamma, got mu={mu}, gamma={gamma}")


def gd_lipschitz_bounds(t_max: int, mu: float, gamma: float) -> np.ndarray:
    """``h(t)`` for ``t = 0..t_max`` under the decreasing step ``1/(mu(t+1))``.

    ``h(0) = 0`` because every input starts from the same point.
    """
    _check_mu_gamma(mu, gamma)
    h = np.zeros(t_max + 1)
    a = 1.0
    for t in range(1, t_max + 1):
        h[t] = a / mu
        eta = 1.0 / (mu * (t + 1))
        a = np.sqrt(max(1.0 - 2.0 * eta * mu + eta * eta * gamma * gamma, 0.0)) * a + eta * mu
    return h


def gd_lipschitz_bound(t: int, mu: float, gamma: float) -> float:
    """Lipschitz constant of the GD iterate map ``x -> y_t(x)``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return float(gd_lipschitz_bounds(t, mu, gamma)[t])


def rough_bilip_bounds(alpha, beta, eps_i, eps_j, delta):
    """Bi-Lipschitz window for approximately solved outputs at distance ``delta``."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    slack = (eps_i + eps_j) / delta
    return alpha - slack, alpha + beta + slack


def gd_error_bound_smooth(t, mu, gamma, init_gap):
    """Error bound ``(1 - mu^2/gamma^2)^(t/2) * init_gap`` for GD with step 1/gamma."""
    _check_mu_gamma(mu, gamma)
    if t == 0:
        return float(init_gap)
    return float((1.0 - (mu / gamma) ** 2) ** (t / 2.0) * init_gap)
