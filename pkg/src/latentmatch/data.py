"""Synthetic manifolds, prior samples, minibatching and IDX ingestion.

Every sampler draws from ``numpy.random.default_rng(seed)`` (PCG64), and
Gaussian draws use that generator's ``standard_normal`` (ziggurat), so a
seed pins the output across runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("swiss-roll-2d", "swiss-roll-3d", "gaussian-mixture", "idx-file")
_ROLL_SCALE = 4.5 * np.pi


class IdxFormatError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IdxMagicError(IdxFormatError):
    pass


class IdxRankError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "swiss-roll-3d"
    n: int = 5000
    noise: float = 0.0
    seed: int = 0
    normalize: bool = False
    path: str | None = None
    # gaussian-mixture only
    means: list = field(default_factory=lambda: [[-0.5, 0.0], [0.5, 0.0]])
    weights: list = field(default_factory=lambda: [0.5, 0.5])
    component_std: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.n <= 0:
            raise ValueError(f"sample count must be positive, got {self.n}")
        if self.noise < 0:
            raise ValueError(f"noise must be non-negative, got {self.noise}")


def swiss_roll_from_uniform(u, heights=None) -> np.ndarray:
    """Noise-free roll points for parameters ``u`` in [0, 1].

    t = 1.5*pi*(1 + 2u); the 2-D point is (t cos t, t sin t) / (4.5*pi), so
    radii span [1/3, 1].  Passing ``heights`` inserts them as the middle
    coordinate of a 3-D roll.
    """
    u = np.asarray(u, dtype=np.float64)
    t = 1.5 * np.pi * (1 + 2 * u)
    x = t * np.cos(t) / _ROLL_SCALE
    y = t * np.sin(t) / _ROLL_SCALE
    if heights is None:
        return np.stack([x, y], axis=1)
    return np.stack([x, np.asarray(heights, dtype=np.float64), y], axis=1)


def sample_swiss_roll(n: int, variant: str = "3d", noise: float = 0.0, seed: int = 0) -> np.ndarray:
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if variant not in ("2d", "3d"):
        raise ValueError(f"variant must be '2d' or '3d', got {variant!r}")
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.0, 1.0, size=n)
    heights = rng.uniform(-1.0, 1.0, size=n) if variant == "3d" else None
    pts = swiss_roll_from_uniform(u, heights)
    if noise > 0:
        pts = pts + noise * rng.standard_normal(pts.shape)
    return pts


def sample_prior(n: int, dim: int, seed: int) -> np.ndarray:
    if n < 0 or dim <= 0:
        raise ValueError(f"need n >= 0 and dim > 0, got n={n}, dim={dim}")
    return np.random.default_rng(seed).standard_normal((n, dim))


def sample_gaussian_mixture(n, means, weights, std, seed, return_labels=False):
    means = np.asarray(means, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if means.ndim != 2 or weights.shape != (means.shape[0],):
        raise ValueError(f"means {means.shape} and weights {weights.shape} disagree")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("mixture weights must be non-negative with a positive sum")
    rng = np.random.default_rng(seed)
    labels = rng.choice(len(weights), size=n, p=weights / weights.sum())
    pts = means[labels] + std * rng.standard_normal((n, means.shape[1]))
    return (pts, labels) if return_labels else pts


def load_dataset(spec: DatasetSpec) -> np.ndarray:
    if spec.kind == "swiss-roll-2d":
        x = sample_swiss_roll(spec.n, "2d", spec.noise, spec.seed)
    elif spec.kind == "swiss-roll-3d":
        x = sample_swiss_roll(spec.n, "3d", spec.noise, spec.seed)
    elif spec.kind == "gaussian-mixture":
        x = sample_gaussian_mixture(spec.n, spec.means, spec.weights, spec.component_std, spec.seed)
    else:
        if not spec.path:
            raise ValueError("idx-file datasets need a path")
        x = load_idx(spec.path)[: spec.n]
    if spec.normalize:
        x = (x - x.mean(axis=0)) / np.maximum(x.std(axis=0), 1e-12)
    return x


# --------------------------------------------------------------------------
# IDX files


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX payload to an ``(n, d)`` array in [0, 1]."""
    if len(buf) < 4:
        raise IdxMagicError(f"file too short for the 4-byte magic ({len(buf)} bytes)", 0)
    if buf[0] != 0 or buf[1] != 0:
        raise IdxMagicError(f"magic must start with two zero bytes, got {buf[:2].hex()}", 0)
    if buf[2] != 0x08:
        raise IdxMagicError(f"data type byte must be 0x08 (unsigned byte), got 0x{buf[2]:02x}", 2)
    rank = buf[3]
    if rank not in (1, 3):
        raise IdxRankError(f"rank must be 1 or 3, got {rank}", 3)
    header_end = 4 + 4 * rank
    if len(buf) < header_end:
        raise IdxTruncatedError(
            f"dimension header needs {header_end} bytes, file has {len(buf)}", len(buf)
        )
    dims = struct.unpack(f">{rank}I", buf[4:header_end])
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(buf) - header_end
    if actual < expected:
        raise IdxTruncatedError(
            f"payload truncated: expected {expected} bytes, found {actual}", header_end + actual
        )
    if actual > expected:
        raise IdxFormatError(
            f"trailing data: expected {expected} payload bytes, found {actual}", header_end + expected
        )
    pixels = np.frombuffer(buf, dtype=np.uint8, count=expected, offset=header_end)
    n = dims[0]
    return pixels.reshape(n, -1).astype(np.float64) / 255.0


def load_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


# --------------------------------------------------------------------------
# minibatching


class BatchIterator:
    """Drop-last minibatches over a fixed dataset.

    The permutation for epoch ``e`` is drawn from ``default_rng([seed, e])``,
    so any batch can be addressed directly by its global index; this is what
    makes a resumed run replay the same batches.
    """

    def __init__(self, data: np.ndarray, batch_size: int, seed: int = 0):
        n = data.shape[0]
        if batch_size <= 0:
            raise ValueError(f"batch size must be positive, got {batch_size}")
        if batch_size > n:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
        self.data = data
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self.batches_per_epoch = n // batch_size
        self._perm_cache: tuple[int, np.ndarray] | None = None

    def permutation(self, epoch: int) -> np.ndarray:
        if self._perm_cache is None or self._perm_cache[0] != epoch:
            perm = np.random.default_rng([self.seed, epoch]).permutation(self.data.shape[0])
            self._perm_cache = (epoch, perm)
        return self._perm_cache[1]

    def batch_indices(self, index: int) -> np.ndarray:
        epoch, pos = divmod(index, self.batches_per_epoch)
        perm = self.permutation(epoch)
        return perm[pos * self.batch_size : (pos + 1) * self.batch_size]

    def batch(self, index: int) -> np.ndarray:
        return self.data[self.batch_indices(index)]

    def epoch_batches(self, epoch: int | None = None):
        """Yield one epoch of batches (the next epoch when none is given)."""
        if epoch is None:
            epoch = self.epoch
            self.epoch += 1
        start = epoch * self.batches_per_epoch
        for i in range(start, start + self.batches_per_epoch):
            yield self.batch(i)

    def __iter__(self):
        return self.epoch_batches()


def minibatches(iterator: BatchIterator):
    return iter(iterator)
