"""Empirical bi-Lipschitz constants from pairwise sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import pdist

ALL_PAIRS_MAX_N = 2000
RANDOM_PAIRS = 1_000_000


class NoValidPairsError(ValueError):
    pass


@dataclass
class BiLipEstimate:
    lip_hat: float
    invlip_hat: float
    n_pairs: int
    seed: Optional[int] = None
    domain: Optional[list] = None

    def to_dict(self) -> dict:
        return {"lip_hat": self.lip_hat, "invlip_hat": self.invlip_hat,
                "n_pairs": self.n_pairs, "seed": self.seed, "domain": self.domain}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def pair_ratios(X, FX, min_sep=1e-6, max_pairs=None, seed=0):
    """Ratios ``||f(x_i) - f(x_j)|| / ||x_i - x_j||`` over point pairs.

    All unordered pairs are used when ``n <= 2000`` (or ``max_pairs`` allows
    it); otherwise ``max_pairs`` (default one million) random pairs.
    Pairs closer than ``min_sep`` are dropped.
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    FX = np.asarray(FX, dtype=np.float64).reshape(len(FX), -1)
    n = len(X)
    if n < 2:
        raise ValueError("need at least two samples")
    limit = RANDOM_PAIRS if max_pairs is None else max_pairs
    n_all = n * (n - 1) // 2
    if n <= ALL_PAIRS_MAX_N and (max_pairs is None or n_all <= max_pairs):
        dx = pdist(X)
        df = pdist(FX)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=limit)
        j = rng.integers(0, n - 1, size=limit)
        j = j + (j >= i)
        dx = np.linalg.norm(X[i] - X[j], axis=1)
        df = np.linalg.norm(FX[i] - FX[j], axis=1)
    keep = dx >= min_sep
    if not np.any(keep):
        raise NoValidPairsError(f"every pair is closer than min_sep={min_sep}")
    return df[keep] / dx[keep]


def estimate_bilip_points(X, FX, min_sep=1e-6, max_pairs=None, seed=0, domain=None) -> BiLipEstimate:
    r = pair_ratios(X, FX, min_sep, max_pairs, seed)
    return BiLipEstimate(float(np.max(r)), float(np.min(r)), int(r.size), seed, domain)


def estimate_bilip(f: Callable, lo, hi, n_samples=1000, seed=0, min_sep=1e-6,
                   dim=None, max_pairs=None) -> BiLipEstimate:
    """Sample ``n_samples`` points uniformly in the box ``[lo, hi]`` and estimate.

    ``f`` maps an ``(n, d)`` array to an ``(n, k)`` (or ``(n,)``) array.
    ``lo`` and ``hi`` are scalars (with ``dim``) or per-coordinate vectors.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    if dim is not None:
        lo = np.broadcast_to(lo, (dim,))
        hi = np.broadcast_to(hi, (dim,))
    rng = np.random.default_rng(seed)
    X = rng.uniform(lo, hi, size=(n_samples, lo.size))
    FX = np.asarray(f(X))
    domain = [lo.tolist(), hi.tolist()]
    return estimate_bilip_points(X, FX, min_sep, max_pairs, seed, domain)


def tightness(lip_hat, bound_L) -> float:
    """Percentage of the imposed Lipschitz bound that the model attains."""
    if not bound_L > 0:
        raise ValueError("bound must be positive")
    return 100.0 * lip_hat / bound_L
