"""Embedding-table drift measured with squared MMD under a Gaussian kernel,
and its conversion to an update compression ratio.

The statistic is the biased V-statistic (diagonal terms included):

    MMD^2 = mean K(x_i, x_j) - 2 mean K(x_i, y_j) + mean K(y_i, y_j)

with K(x, y) = exp(-||x - y||^2 / (2 sigma^2)). The bandwidth defaults to
the median pairwise distance over the pooled sample (1.0 when that median
is zero, i.e. all pooled rows coincide).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import Rng, sigmoid


@dataclass
class MmdConfig:
    sample_n1: int | None = None    # None (or "full") uses every row
    sample_n2: int | None = None
    bandwidth: float | None = None  # None selects the median heuristic
    seed: int = 0
    paired: bool = False            # sample the same row indices from both tables

    def __post_init__(self):
        for nm in ("sample_n1", "sample_n2"):
            v = getattr(self, nm)
            if v == "full":
                setattr(self, nm, None)
            elif v is not None and v < 2:
                raise ValueError("sample counts must be >= 2 or the full sentinel")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("fixed bandwidth must be positive")


@dataclass
class AdaptiveConfig:
    C: float = 0.2
    skip_threshold: float = 1e-6

    def __post_init__(self):
        if not 0 < self.C <= 1:
            raise ValueError("C must lie in (0, 1]")
        if self.skip_threshold < 0:
            raise ValueError("skip_threshold must be non-negative")


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def median_heuristic(pooled: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled rows."""
    d2 = _pairwise_sq_dists(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 0.0
    return med if med > 0 else 1.0


def _sample_rows(x: np.ndarray, count: int | None, rng: Rng) -> np.ndarray:
    if count is None or count >= len(x):
        return x
    return x[np.sort(rng.choice(len(x), count, replace=False))]


def mmd2(X_t: np.ndarray, X_t1: np.ndarray, cfg: MmdConfig = MmdConfig()) -> float:
    """Squared MMD between sampled rows of two tables, clamped at 0.

    Sampling is deterministic per cfg.seed; rows are drawn independently
    from each table unless cfg.paired.
    """
    a = np.asarray(X_t, dtype=np.float64)
    b = np.asarray(X_t1, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("tables must be 2-D with equal embedding dimension")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("tables must be non-empty")
    rng = Rng(cfg.seed)
    if cfg.paired:
        if len(a) != len(b):
            raise ValueError("paired sampling requires equal row counts")
        count = cfg.sample_n1 if cfg.sample_n1 is not None else cfg.sample_n2
        if count is None or count >= len(a):
            sx, sy = a, b
        else:
            idx = np.sort(rng.child("mmd-pair").choice(len(a), count, replace=False))
            sx, sy = a[idx], b[idx]
    else:
        sx = _sample_rows(a, cfg.sample_n1, rng.child("mmd-x"))
        sy = _sample_rows(b, cfg.sample_n2, rng.child("mmd-y"))
    sigma = cfg.bandwidth if cfg.bandwidth is not None else median_heuristic(np.vstack([sx, sy]))
    denom = 2.0 * sigma * sigma
    kxx = np.exp(-_pairwise_sq_dists(sx, sx) / denom).mean()
    kxy = np.exp(-_pairwise_sq_dists(sx, sy) / denom).mean()
    kyy = np.exp(-_pairwise_sq_dists(sy, sy) / denom).mean()
    return max(0.0, float(kxx - 2.0 * kxy + kyy))


def choose_ratio(mmd: float, cfg: AdaptiveConfig = AdaptiveConfig()) -> int | None:
    """ceil(1 / (C * (2 sigmoid(mmd) - 1))), or None (skip the update)
    when mmd is at or below the skip threshold.

    Non-increasing in mmd and bounded below by ceil(1/C).
    """
    if mmd < 0:
        raise ValueError("mmd must be non-negative")
    if mmd <= cfg.skip_threshold:
        return None
    denom = cfg.C * (2.0 * float(sigmoid(np.float64(mmd))) - 1.0)
    return math.ceil(1.0 / denom)
