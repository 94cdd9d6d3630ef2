"""Deterministic uncertainty quantification on top of a bi-Lipschitz extractor.

Each class ``c`` owns a projection ``W_c`` and a centroid ``e_c``. The kernel

    K_c(f) = exp(-mean((W_c f - e_c)^2) / (2 sigma^2))

measures closeness of a feature vector to the centroid; the loss is the sum
over classes of the binary cross entropy between ``K_c`` and the one-hot
label. Centroids follow an exponential moving average of the projected
features of their class and receive no gradient.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from . import model as bl
from .training import TrainConfig, adapter_for, make_optimizer

K_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# data


@dataclass
class MoonsConfig:
    n_samples: int = 1500
    noise: float = 0.1
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.n_samples < 2:
            raise ValueError("need at least two samples")


def two_moons(config: MoonsConfig):
    """Two interleaving half circles with labels 0 (upper) and 1 (lower)."""
    n_up = config.n_samples // 2
    n_lo = config.n_samples - n_up
    t_up = np.linspace(0, np.pi, n_up)
    t_lo = np.linspace(0, np.pi, n_lo)
    upper = np.column_stack([np.cos(t_up), np.sin(t_up)])
    lower = np.column_stack([1 - np.cos(t_lo), 0.5 - np.sin(t_lo)])
    X = np.vstack([upper, lower])
    y = np.concatenate([np.zeros(n_up, dtype=np.int64), np.ones(n_lo, dtype=np.int64)])
    rng = np.random.default_rng(config.seed)
    if config.shuffle:
        order = rng.permutation(len(X))
        X, y = X[order], y[order]
    if config.noise > 0:
        X = X + rng.normal(scale=config.noise, size=X.shape)
    return X, y


# ---------------------------------------------------------------------------
# head


@dataclass
class DuqHead:
    W: np.ndarray                 # (C, e, f)
    sigma: float = 0.1
    gamma: float = 0.999
    N: np.ndarray = None          # (C,)
    m: np.ndarray = None          # (C, e)
    centroids: np.ndarray = None  # (C, e)
    seen: np.ndarray = None       # (C,) bool

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        C, e, _ = self.W.shape
        if self.N is None:
            self.N = np.zeros(C)
        if self.m is None:
            self.m = np.zeros((C, e))
        if self.centroids is None:
            self.centroids = np.zeros((C, e))
        if self.seen is None:
            self.seen = np.zeros(C, dtype=bool)

    @property
    def n_classes(self):
        return self.W.shape[0]

    @property
    def centroid_dim(self):
        return self.W.shape[1]

    @property
    def feature_dim(self):
        return self.W.shape[2]


def make_head(n_classes, centroid_dim, feature_dim, sigma=0.1, gamma=0.999, seed=0) -> DuqHead:
    W = np.random.default_rng(seed).normal(0.0, 0.05, size=(n_classes, centroid_dim, feature_dim))
    return DuqHead(W, sigma, gamma)


def _project(head, F):
    """``W_c f`` for every class: shape (n, C, e)."""
    return np.einsum("cef,nf->nce", head.W, F)


def _sqdist(head, F):
    Z = _project(head, F)
    D = Z - head.centroids[None]
    return Z, D, np.mean(D * D, axis=2)


def duq_kernel(head: DuqHead, features, c: Optional[int] = None):
    """Kernel values: scalar for one feature vector and a class, else arrays."""
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _, _, sq = _sqdist(head, F)
    K = np.exp(-sq / (2 * head.sigma ** 2))
    if c is not None:
        K = K[:, c]
    if np.ndim(features) == 1:
        return K[0]
    return K


def duq_loss(head: DuqHead, features, onehot):
    """Batch-mean of the class-summed BCE.

    Returns ``(loss, grad_features, grad_W)``. Kernel values are clamped to
    ``[1e-12, 1 - 1e-12]``; clamped entries pass no gradient.
    """
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    Yh = np.atleast_2d(np.asarray(onehot, dtype=np.float64))
    n = F.shape[0]
    _, D, sq = _sqdist(head, F)
    s = sq / (2 * head.sigma ** 2)
    K = np.exp(-s)
    Kc = np.clip(K, K_CLAMP, 1 - K_CLAMP)
    loss = -np.sum(Yh * np.log(Kc) + (1 - Yh) * np.log1p(-Kc)) / n
    inside = (K > K_CLAMP) & (K < 1 - K_CLAMP)
    # dL/ds for the unclamped form, written to avoid dividing by tiny 1 - K
    dLds = np.where(inside, Yh - (1 - Yh) * K / np.maximum(-np.expm1(-s), 1e-300), 0.0) / n
    coef = dLds[:, :, None] * D / (head.centroid_dim * head.sigma ** 2)   # dL/dZ
    gF = np.einsum("nce,cef->nf", coef, head.W)
    gW = np.einsum("nce,nf->cef", coef, F)
    return float(loss), gF, gW


def centroid_update(head: DuqHead, features, labels) -> DuqHead:
    """Exponential moving average of class sums and counts (in place)."""
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    Z = _project(head, F)
    g = head.gamma
    for c in range(head.n_classes):
        sel = labels == c
        n_c = float(np.sum(sel))
        total = Z[sel, c].sum(axis=0)
        if not head.seen[c]:
            if n_c == 0:
                continue
            head.N[c] = n_c
            head.m[c] = total
            head.seen[c] = True
        else:
            head.N[c] = g * head.N[c] + (1 - g) * n_c
            head.m[c] = g * head.m[c] + (1 - g) * total
        head.centroids[c] = head.m[c] / head.N[c]
    return head


def certainty(head: DuqHead, features):
    K = duq_kernel(head, np.atleast_2d(features))
    out = K.max(axis=1)
    return out[0] if np.ndim(features) == 1 else out


def predict(head: DuqHead, features):
    """Most certain class; ``argmax`` already resolves ties to the lowest index."""
    K = duq_kernel(head, np.atleast_2d(features))
    out = np.argmax(K, axis=1)
    return int(out[0]) if np.ndim(features) == 1 else out


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic with midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# extractor and training


def make_moons_extractor(alpha, beta, hidden=20, layers=2, out_dim=40, seed=0) -> bl.CompositeBlnn:
    """Composite BLNN ``R^2 -> R^40`` used as the two-moons feature map."""
    dims1 = [2] + [hidden] * layers + [1]
    dims2 = [out_dim] + [hidden] * layers + [1]
    first = bl.make_blnn(dims1, alpha, beta, seed=seed)
    second = bl.make_blnn(dims2, alpha, beta, seed=seed + 10_000)
    return bl.CompositeBlnn(first, second)


def moons_train_config(**overrides) -> TrainConfig:
    doc = dict(epochs=30, batch_size=64, optimizer="sgd", lr=0.01, momentum=0.9,
               weight_decay=1e-4, loss="bce")
    doc.update(overrides)
    return TrainConfig(**doc)


@dataclass
class DuqReport:
    accuracy: float
    auroc: float
    history: list
    grid: Optional[np.ndarray] = None
    seconds: float = 0.0

    def metrics(self) -> dict:
        return {"accuracy": self.accuracy, "auroc": self.auroc,
                "final_loss": self.history[-1] if self.history else None}


def _features(adapter, X, chunk=2000):
    return np.vstack([adapter.predict(X[i:i + chunk]) for i in range(0, len(X), chunk)])


def certainty_grid(adapter, head, X, n=200, pad=0.4):
    """``(n*n, 3)`` array of ``x, y, certainty`` over the padded bounding box."""
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = hi - lo
    lo, hi = lo - pad * span, hi + pad * span
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n))
    P = np.column_stack([gx.ravel(), gy.ravel()])
    return np.column_stack([P, certainty(head, _features(adapter, P))])


def write_grid_csv(grid, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "certainty"])
        for row in grid:
            w.writerow([format(v, ".10g") for v in row])


def train_duq(extractor, head: DuqHead, train, test, config: Optional[TrainConfig] = None,
              grid_size: int = 200, n_background: int = 2000) -> DuqReport:
    """Jointly train extractor and head; returns accuracy, AUROC and certainty grid.

    ``train`` and ``test`` are ``(X, labels)`` pairs. AUROC scores test points
    against uniform background points from the padded bounding box. Set
    ``grid_size=0`` to skip the grid.
    """
    if config is None:
        config = moons_train_config()
    Xtr, ytr = train
    Xte, yte = test
    C = head.n_classes
    onehot = np.eye(C)[ytr]
    ad = adapter_for(extractor, config.solver)
    n_ext = ad.get().size
    params = np.concatenate([ad.get(), head.W.ravel()])
    opt = make_optimizer(config, params.size)
    rng = np.random.default_rng(config.seed)
    n = len(Xtr)
    bs = config.batch_size or n
    t0 = time.perf_counter()
    # seed the centroids from the first batch before any gradient step
    first = rng.permutation(n)[:bs]
    f0, _ = ad.forward(Xtr[first], keys=first)
    centroid_update(head, f0, ytr[first])
    history = []
    for epoch in range(1, config.epochs + 1):
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            F, tape = ad.forward(Xtr[idx], keys=idx)
            loss, gF, gW = duq_loss(head, F, onehot[idx])
            total += loss * len(idx)
            g_ext = ad.backward(tape, gF)
            params = opt.step(np.concatenate([ad.get(), head.W.ravel()]),
                              np.concatenate([g_ext, gW.ravel()]))
            ad.set(params[:n_ext])
            head.W = params[n_ext:].reshape(head.W.shape)
            F_new, _ = ad.forward(Xtr[idx], keys=idx)
            centroid_update(head, F_new, ytr[idx])
        history.append(total / n)
    Fte = _features(ad, Xte)
    acc = float(np.mean(predict(head, Fte) == yte))
    lo, hi = Xtr.min(axis=0), Xtr.max(axis=0)
    span = hi - lo
    bg = np.random.default_rng(config.seed + 1).uniform(lo - 0.4 * span, hi + 0.4 * span,
                                                        size=(n_background, 2))
    scores = np.concatenate([certainty(head, Fte), certainty(head, _features(ad, bg))])
    labels = np.concatenate([np.ones(len(Xte)), np.zeros(n_background)])
    auc = auroc(scores, labels)
    grid = certainty_grid(ad, head, Xtr, grid_size) if grid_size else None
    return DuqReport(acc, auc, history, grid, time.perf_counter() - t0)


def run_two_moons(alpha, beta, seed=0, epochs=30, sigma=0.1, gamma=0.999,
                  grid_size=200, n_train=1500, n_test=200, noise=0.1) -> DuqReport:
    """The full two-moons pipeline for one ``(alpha, beta)`` setting."""
    train = two_moons(MoonsConfig(n_train, noise, seed))
    test = two_moons(MoonsConfig(n_test, noise, seed + 1_000))
    extractor = make_moons_extractor(alpha, beta, seed=seed)
    head = make_head(2, 10, extractor.out_dim, sigma, gamma, seed=seed)
    return train_duq(extractor, head, train, test,
                     moons_train_config(epochs=epochs, seed=seed), grid_size)
