"""Reconstruction, distribution and neighborhood-preservation metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import ShapeError


@dataclass
class MetricReport:
    values: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        bad = [k for k, v in self.values.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite metric values: {bad}")

    def rows(self, run_id: str, step: int):
        for key in sorted(self.values):
            yield [run_id, step, key, repr(float(self.values[key]))]
        for key in sorted(self.counts):
            yield [run_id, step, f"count.{key}", str(int(self.counts[key]))]
        yield [run_id, step, "seed", str(self.seed)]

    def to_csv(self, run_id: str, step: int) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["run_id", "step", "metric", "value"])
        w.writerows(self.rows(run_id, step))
        return out.getvalue()


def mse_metric(x, x_hat) -> float:
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def wasserstein_1d(a, b) -> float:
    """Exact W2 between two equal-size empirical 1-D distributions."""
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    if a.size != b.size:
        raise ShapeError(f"sample sizes differ: {a.size} vs {b.size}")
    return float(np.sqrt(np.mean((np.sort(a) - np.sort(b)) ** 2)))


def random_directions(d: int, n_proj: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal((n_proj, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_w2(A, B, n_proj: int = 128, seed: int = 0) -> float:
    """``sqrt(mean_theta W2(A.theta, B.theta)^2)`` over random unit directions."""
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape != B.shape:
        raise ShapeError(f"sliced_w2 needs equal (n, d) sample sets, got {A.shape} and {B.shape}")
    if n_proj < 1:
        raise ValueError("n_proj must be at least 1")
    dirs = random_directions(A.shape[1], n_proj, seed)
    pa = np.sort(A @ dirs.T, axis=0)
    pb = np.sort(B @ dirs.T, axis=0)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def _neighbor_ranks(X: np.ndarray) -> np.ndarray:
    """ranks[i, j] = position of j in i's distance ordering (self excluded, 1-based)."""
    n = X.shape[0]
    sq = np.sum(X**2, axis=1)
    dist = sq[:, None] + sq[None, :] - 2 * X @ X.T
    np.fill_diagonal(dist, -np.inf)
    # stable sort: equal distances are ranked by index
    order = np.argsort(dist, axis=1, kind="stable")
    ranks = np.empty((n, n), dtype=np.int64)
    rows = np.arange(n)[:, None]
    ranks[rows, order] = np.arange(n)[None, :]
    return ranks


def _rank_penalty(ranks_ref: np.ndarray, ranks_other: np.ndarray, k: int) -> float:
    n = ranks_ref.shape[0]
    intruders = (ranks_other <= k) & (ranks_ref > k)
    penalty = np.sum((ranks_ref - k) * intruders)
    return 1.0 - 2.0 / (n * k * (2 * n - 3 * k - 1)) * float(penalty)


def trustworthiness_continuity(X, Z, k: int = 10) -> tuple[float, float]:
    """Rank-based trustworthiness and continuity of embedding ``Z`` of ``X``."""
    X, Z = np.asarray(X, dtype=np.float64), np.asarray(Z, dtype=np.float64)
    n = X.shape[0]
    if Z.shape[0] != n:
        raise ShapeError(f"row counts differ: {n} vs {Z.shape[0]}")
    if not 1 <= k < n / 2:
        raise ValueError(f"k must satisfy 1 <= k < n/2 (n={n}), got {k}")
    rx, rz = _neighbor_ranks(X), _neighbor_ranks(Z)
    return _rank_penalty(rx, rz, k), _rank_penalty(rz, rx, k)


def sample_sphere(n: int, d: int, r: float, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return r * v / np.linalg.norm(v, axis=1, keepdims=True)


def assignment_w2(A, B) -> float:
    """Total-cost W2 ``sqrt(min_perm sum_i |a_i - b_perm(i)|^2)`` between point sets."""
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    cost = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2 * A @ B.T
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(max(cost[rows, cols].sum(), 0.0)))


def sphere_concentration_check(n: int, d: int, r: float = 1.0, seed: int = 0) -> tuple[float, float]:
    """Optimal-assignment W2 between two uniform point sets on a radius-r sphere.

    Returns ``(empirical, sqrt(2 n) * r)``.
    """
    if n > 256:
        raise ValueError("exact assignment is limited to n <= 256")
    rng = np.random.default_rng(seed)
    A = sample_sphere(n, d, r, rng)
    B = sample_sphere(n, d, r, rng)
    return assignment_w2(A, B), math.sqrt(2 * n) * r


def latent_moments(Z) -> tuple[float, float]:
    """``(|column means|, max_j |population var_j - 1|)``."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ShapeError(f"need an (n >= 2, d) array, got {Z.shape}")
    m = Z.mean(axis=0)
    v = np.mean((Z - m) ** 2, axis=0)
    return float(np.linalg.norm(m)), float(np.max(np.abs(v - 1.0)))


def centralize_rows(Z) -> np.ndarray:
    """Subtract each row's own coordinate mean (sphere-projection style centering).

    Evaluation-time comparison utility only; it is not part of training.
    """
    Z = np.asarray(Z, dtype=np.float64)
    return Z - Z.mean(axis=1, keepdims=True)
