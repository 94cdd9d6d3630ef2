"""Regression training, outer optimizers, annealing and the spectral-norm baseline.

Models are trained through small adapters that expose a flat parameter
vector, a batched forward pass keyed by sample index (so the inner solver
can warm start from the previous epoch) and a backward pass returning the
flat gradient. Gate weights are projected back onto the nonnegative orthant
after every optimizer update.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import convexnet as cn
from . import model as bl
from .estimator import estimate_bilip_points
from .lft import SolverConfig

TRAIN_SOLVER = SolverConfig(kind="newton", tol=1e-8, max_iters=100)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset1D:
    xs: np.ndarray
    ys: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64).reshape(-1, 1)
        self.ys = np.asarray(self.ys, dtype=np.float64).reshape(-1, 1)
        if not (np.all(np.isfinite(self.xs)) and np.all(np.isfinite(self.ys))):
            raise ValueError("dataset values must be finite")

    def __len__(self):
        return len(self.xs)


def step_function(x):
    x = np.asarray(x, dtype=np.float64)
    return x + (x > 0)


def make_step_dataset(n=300, lo=-2.0, hi=2.0, seed=0) -> Dataset1D:
    xs = np.random.default_rng(seed).uniform(lo, hi, n)
    return Dataset1D(xs, step_function(xs), "step")


def make_linear_dataset(slope, n=300, range=(-2.0, 2.0), seed=0) -> Dataset1D:
    xs = np.random.default_rng(seed).uniform(range[0], range[1], n)
    return Dataset1D(xs, slope * xs, f"linear{slope:g}")


def make_exp_dataset(n=300, range=(-2.0, 2.0), seed=0) -> Dataset1D:
    xs = np.random.default_rng(seed).uniform(range[0], range[1], n)
    return Dataset1D(xs, np.exp(xs), "exp")


def make_test_grid(fn: Callable, n=2000, lo=-1.0, hi=1.0) -> Dataset1D:
    xs = np.linspace(lo, hi, n)
    return Dataset1D(xs, fn(xs), "test")


TARGETS = {
    "step": step_function,
    "exp": np.exp,
}


def target_fn(name: str, slope: float = 1.0) -> Callable:
    if name == "linear":
        return lambda x: slope * np.asarray(x, dtype=np.float64)
    return TARGETS[name]


# ---------------------------------------------------------------------------
# losses


def loss_and_grad(kind: str, pred, target):
    """Mean loss over all entries and its gradient with respect to ``pred``.

    ``mse`` uses ``(a - b)^2`` without the 1/2 factor; ``bce`` expects
    probabilities in ``(0, 1)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = max(pred.size, 1)
    if kind == "mse":
        diff = pred - target
        return float(np.sum(diff * diff) / n), 2.0 * diff / n
    if kind == "bce":
        p = np.clip(pred, 1e-12, 1 - 1e-12)
        loss = -(target * np.log(p) + (1 - target) * np.log1p(-p))
        grad = -target / p + (1 - target) / (1 - p)
        return float(np.sum(loss) / n), grad / n
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# optimizers on flat vectors


class Adam:
    """Adam with bias correction; matches the usual deep-learning defaults."""

    def __init__(self, size, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if not lr > 0:
            raise ValueError("lr must be positive")
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, p, g):
        if self.wd:
            g = g + self.wd * p
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        return p - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay."""

    def __init__(self, size, lr=0.01, momentum=0.0, weight_decay=0.0):
        if not lr > 0:
            raise ValueError("lr must be positive")
        self.lr, self.momentum, self.wd = lr, momentum, weight_decay
        self.buf = None

    def step(self, p, g):
        if self.wd:
            g = g + self.wd * p
        if self.momentum:
            self.buf = g.copy() if self.buf is None else self.momentum * self.buf + g
            g = self.buf
        return p - self.lr * g


def make_optimizer(config: "TrainConfig", size):
    if config.optimizer == "adam":
        return Adam(size, config.lr, weight_decay=config.weight_decay)
    if config.optimizer == "sgd":
        return SGD(size, config.lr, config.momentum, config.weight_decay)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


# ---------------------------------------------------------------------------
# spectral-normalization baseline


@dataclass
class SnLayer:
    w: np.ndarray
    b: np.ndarray
    u: np.ndarray

    @property
    def shape(self):
        return self.w.shape


def _unit(v):
    return v / max(np.linalg.norm(v), 1e-12)


def sn_normalize(layer: SnLayer, power_iters=1, update=True):
    """Return ``(w / sigma, sigma, u, v)`` after ``power_iters`` power steps.

    The left singular vector estimate ``u`` is stored back on the layer when
    ``update`` is set, so successive calls continue the iteration.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be at least 1")
    u = layer.u
    for _ in range(power_iters):
        v = _unit(layer.w.T @ u)
        u = _unit(layer.w @ v)
    sigma = float(u @ layer.w @ v)
    if update:
        layer.u = u
    return layer.w / sigma, sigma, u, v


@dataclass
class SnMlp:
    """ReLU network with spectrally normalized layers and input scale ``L``."""

    layers: list
    scale: float

    @property
    def dim(self):
        return self.layers[0].w.shape[1]


def make_sn_mlp(dims=(1, 45, 45, 45, 1), scale=1.0, seed=0) -> SnMlp:
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        u = _unit(rng.normal(size=fan_out))
        layers.append(SnLayer(w, b, u))
    return SnMlp(layers, float(scale))


def sn_forward(model: SnMlp, X, update=False, tape=None):
    h = model.scale * np.asarray(X, dtype=np.float64)
    for k, layer in enumerate(model.layers):
        wn, sigma, u, v = sn_normalize(layer, 1, update)
        a = h @ wn.T + layer.b
        if tape is not None:
            tape.append((h, a, wn, sigma, u, v))
        h = a if k == len(model.layers) - 1 else np.maximum(a, 0.0)
    return h


def sn_backward(model: SnMlp, tape, grad_out):
    """Flat gradient of the loss (layer order ``w, b``) through the normalization."""
    grads = []
    g = grad_out
    for k in range(len(model.layers) - 1, -1, -1):
        h, a, wn, sigma, u, v = tape[k]
        if k < len(model.layers) - 1:
            g = g * (a > 0)
        gwn = g.T @ h
        gw = (gwn - np.sum(gwn * wn) * np.outer(u, v)) / sigma
        grads.append((gw, g.sum(axis=0)))
        g = g @ wn
    flat = []
    for gw, gb in reversed(grads):
        flat += [gw.ravel(), gb]
    return np.concatenate(flat)


# ---------------------------------------------------------------------------
# adapters


class BlnnAdapter:
    """Flat-vector view of a ``Blnn`` for the training loop."""

    def __init__(self, model: bl.Blnn, solver: SolverConfig = TRAIN_SOLVER):
        self.model = model
        self.solver = solver
        self.cache = bl.WarmCache(model.dim)
        self.mask = cn.gate_mask_vector(model.core)
        self.last_iters = []

    def get(self):
        return cn.flatten(self.model.core)

    def set(self, vec):
        self.model.core = cn.project_nonneg(cn.unflatten(self.model.core, vec))

    def forward(self, X, keys=None):
        out, res = bl.blnn_forward(self.model, X, self.solver, self.cache, keys)
        self.last_iters.append(float(np.mean(res.iters)))
        return out, (X, res)

    def backward(self, tape, grad_out):
        X, res = tape
        pg, _ = bl.blnn_backward(self.model, X, res.y_star, grad_out, self.solver.tol)
        return cn.flatten(pg)

    def predict(self, X):
        out, _ = bl.blnn_forward(self.model, X, self.solver)
        return out

    @property
    def bound(self):
        return self.model.config.upper

    def set_bound(self, value):
        cfg = self.model.config
        self.model.config = bl.BlnnConfig(cfg.alpha, value - cfg.alpha)


class CompositeAdapter:
    def __init__(self, model: bl.CompositeBlnn, solver: SolverConfig = TRAIN_SOLVER):
        self.model = model
        self.solver = solver
        self.caches = (bl.WarmCache(model.first.dim), bl.WarmCache(model.second.dim))
        self.n1 = model.first.core.n_params
        self.mask = np.concatenate([cn.gate_mask_vector(model.first.core),
                                    cn.gate_mask_vector(model.second.core)])
        self.last_iters = []

    def get(self):
        return np.concatenate([cn.flatten(self.model.first.core), cn.flatten(self.model.second.core)])

    def set(self, vec):
        m = self.model
        m.first.core = cn.project_nonneg(cn.unflatten(m.first.core, vec[:self.n1]))
        m.second.core = cn.project_nonneg(cn.unflatten(m.second.core, vec[self.n1:]))

    def forward(self, X, keys=None):
        out, tape = bl.composite_forward(self.model, X, self.solver, self.caches, keys)
        self.last_iters.append(float(np.mean(tape.lft1.iters) + np.mean(tape.lft2.iters)))
        return out, tape

    def backward(self, tape, grad_out):
        g1, g2, _ = bl.composite_backward(self.model, tape, grad_out, self.solver.tol)
        return np.concatenate([cn.flatten(g1), cn.flatten(g2)])

    def predict(self, X):
        out, _ = bl.composite_forward(self.model, X, self.solver)
        return out


class SnAdapter:
    def __init__(self, model: SnMlp):
        self.model = model
        self.mask = None
        self.last_iters = []

    def get(self):
        return np.concatenate([np.concatenate([l.w.ravel(), l.b]) for l in self.model.layers])

    def set(self, vec):
        i = 0
        for l in self.model.layers:
            l.w = vec[i:i + l.w.size].reshape(l.w.shape)
            i += l.w.size
            l.b = vec[i:i + l.b.size].copy()
            i += l.b.size

    def forward(self, X, keys=None):
        tape = []
        return sn_forward(self.model, X, update=True, tape=tape), tape

    def backward(self, tape, grad_out):
        return sn_backward(self.model, tape, grad_out)

    def predict(self, X):
        return sn_forward(self.model, X, update=False)

    @property
    def bound(self):
        return self.model.scale

    def set_bound(self, value):
        self.model.scale = float(value)


def adapter_for(model, solver: SolverConfig = TRAIN_SOLVER):
    if isinstance(model, bl.Blnn):
        return BlnnAdapter(model, solver)
    if isinstance(model, bl.CompositeBlnn):
        return CompositeAdapter(model, solver)
    if isinstance(model, SnMlp):
        return SnAdapter(model)
    raise TypeError(f"cannot train {type(model).__name__}")


# ---------------------------------------------------------------------------
# annealing


@dataclass
class AnnealState:
    bound: float
    check_period: int = 5
    closeness: float = 0.05
    growth: float = 1.5

    def __post_init__(self):
        if not self.bound > 0:
            raise ValueError("bound must be positive")
        if not self.growth > 1:
            raise ValueError("growth must exceed 1")


def anneal_step(state: AnnealState, lip_hat: float) -> AnnealState:
    """Relax the bound by ``growth`` when the model presses against it."""
    if abs(lip_hat - state.bound) <= state.closeness:
        return AnnealState(state.bound * state.growth, state.check_period,
                           state.closeness, state.growth)
    return state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: Optional[int] = None
    optimizer: str = "adam"
    lr: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    loss: str = "mse"
    seed: int = 0
    solver: SolverConfig = field(default_factory=lambda: TRAIN_SOLVER)
    lr_schedule: str = "constant"
    lr_min: float = 0.0
    estimate_every: int = 0
    estimate_samples: int = 1000
    estimate_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch."""
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        frac = (epoch - 1) / (self.epochs - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + np.cos(np.pi * frac))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["solver"] = self.solver.to_dict()
        doc["estimate_range"] = list(self.estimate_range)
        return doc

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        doc = dict(doc)
        if "solver" in doc and isinstance(doc["solver"], dict):
            doc["solver"] = SolverConfig.from_dict(doc["solver"])
        if "estimate_range" in doc:
            doc["estimate_range"] = tuple(doc["estimate_range"])
        return cls(**doc)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lip_hat: float = float("nan")
    invlip_hat: float = float("nan")
    mean_lft_iters: float = float("nan")
    bound: float = float("nan")


@dataclass
class TrainReport:
    history: list
    model: object
    seconds: float

    @property
    def losses(self):
        return np.array([r.loss for r in self.history])

    def write_csv(self, path):
        write_metrics_csv(self.history, path)


METRIC_COLUMNS = ("epoch", "loss", "lip_hat", "invlip_hat", "mean_lft_iters", "bound")


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in history:
            w.writerow([r.epoch] + [format(getattr(r, c), ".10g") for c in METRIC_COLUMNS[1:]])


def empirical_bilip(predict, samples=1000, lo=-1.0, hi=1.0, seed=0, dim=1):
    """Estimate on a fixed uniform sample of the box, reused across epochs."""
    X = np.random.default_rng(seed).uniform(lo, hi, size=(samples, dim))
    return estimate_bilip_points(X, predict(X), seed=seed, domain=[[lo] * dim, [hi] * dim])


class TrainingDivergedError(RuntimeError):
    pass


def train_regression(model, data: Dataset1D, config: TrainConfig,
                     anneal: Optional[AnnealState] = None,
                     on_epoch: Optional[Callable] = None) -> TrainReport:
    """Fit ``model`` to ``data``.

    The model is updated in place. With ``anneal`` set, the Lipschitz bound
    starts at ``anneal.bound`` and is relaxed every ``check_period`` epochs
    when the empirical constant comes within ``closeness`` of it; the
    empirical constant is then measured every epoch.
    """
    ad = adapter_for(model, config.solver)
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config, ad.get().size)
    n = len(data)
    bs = n if not config.batch_size else config.batch_size
    estimate_every = config.estimate_every
    if anneal is not None:
        ad.set_bound(anneal.bound)
        estimate_every = estimate_every or 1
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        ad.last_iters = []
        opt.lr = config.lr_at(epoch)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            try:
                out, tape = ad.forward(data.xs[idx], keys=idx)
            except RuntimeError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: {exc}") from exc
            loss, g = loss_and_grad(config.loss, out, data.ys[idx])
            total += loss * len(idx)
            grad = ad.backward(tape, g)
            if not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(f"epoch {epoch}: non-finite gradient")
            ad.set(opt.step(ad.get(), grad))
        rec = EpochRecord(epoch, total / n)
        if ad.last_iters:
            rec.mean_lft_iters = float(np.mean(ad.last_iters))
        if hasattr(ad, "bound"):
            rec.bound = ad.bound
        if estimate_every and epoch % estimate_every == 0:
            lo, hi = config.estimate_range
            est = empirical_bilip(ad.predict, config.estimate_samples, lo, hi, seed=config.seed)
            rec.lip_hat, rec.invlip_hat = est.lip_hat, est.invlip_hat
            if anneal is not None and epoch % anneal.check_period == 0:
                anneal = anneal_step(anneal, est.lip_hat)
                ad.set_bound(anneal.bound)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainReport(history, model, time.perf_counter() - t0)


def predict(model, X, solver: SolverConfig = TRAIN_SOLVER):
    return adapter_for(model, solver).predict(np.asarray(X, dtype=np.float64).reshape(len(X), -1))


def evaluate_mse(model, test: Dataset1D, solver: SolverConfig = TRAIN_SOLVER) -> float:
    return loss_and_grad("mse", predict(model, test.xs, solver), test.ys)[0]


def default_blnn(L=None, alpha=1.0, beta=None, hidden=64, layers=2, seed=0,
                 activation="softplus", input_gain=1.0) -> bl.Blnn:
    """BLNN used for the one-dimensional fitting experiments.

    Either ``L`` (with ``beta = L - alpha``) or ``beta`` must be given.
    ``input_gain`` multiplies the first layer's weights and bias at
    initialization, which sharpens the softplus kinks of the core.
    """
    if beta is None:
        beta = L - alpha
    dims = [1] + [hidden] * layers + [1]
    model = bl.make_blnn(dims, alpha, beta, activation, seed=seed)
    model.core.layers[0].w_input *= input_gain
    model.core.layers[0].bias *= input_gain
    return model


def save_run_config(config: TrainConfig, path, extra=None):
    doc = config.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
