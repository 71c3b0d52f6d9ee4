"""Dense float64 primitives and a reproducible random stream.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64
(row-major). Every function here also accepts leading batch axes, which
the layer code relies on to run many sequences or many experts at once.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 2.0 ** -53


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a single integer."""
    with np.errstate(over="ignore"):
        return int(_mix64(np.array([x & MASK64], dtype=np.uint64))[0])


class Rng:
    """Counter-based SplitMix64 stream.

    The ``i``-th output (1-based) is ``mix64(seed + i * 0x9E3779B97F4A7C15)``,
    which is exactly the sequence produced by the reference sequential
    SplitMix64 generator. Being counter based makes bulk draws a single
    vectorized numpy expression, and the stream is identical on every
    platform and numpy version.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * _GAMMA)

    def random(self, size=None):
        """Uniform doubles on the open interval (0, 1)."""
        shape = () if size is None else (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        bits = self.next_u64(n) >> np.uint64(11)
        u = (bits.astype(np.float64) + 0.5) * _TWO_M53
        return float(u[0]) if size is None else u.reshape(shape)

    def uniform(self, low, high, size=None):
        return low + (high - low) * self.random(size)

    def normal(self, size=None):
        """Standard normals by Box-Muller (one pair of uniforms per draw)."""
        shape = () if size is None else (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = self.random((n, 2))
        z = np.sqrt(-2.0 * np.log(u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return float(z[0]) if size is None else z.reshape(shape)

    def integers(self, low: int, high: int, size=None):
        """Integers uniform on ``[low, high]`` (inclusive)."""
        span = high - low + 1
        u = self.random(size)
        return low + int(u * span) if size is None else low + np.floor(u * span).astype(np.int64)

    def categorical(self, probs) -> int:
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        idx = int(np.searchsorted(cdf, self.random() * cdf[-1], side="right"))
        return min(idx, len(cdf) - 1)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; the parent's position is untouched."""
        return Rng(seed_split(self.seed, key))


def seed_split(seed: int, key: int) -> int:
    """Derive a child seed from ``(seed, key)``."""
    return mix64(mix64(seed) ^ mix64((key + 0x632BE59BD9B4E019) & MASK64))


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``W @ x + b``; ``x`` may carry leading batch axes (rows of vectors)."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(
            f"affine: shape mismatch W{W.shape} x{x.shape} b{b.shape}")
    return x @ W.T + b


def sigmoid(x) -> np.ndarray:
    return expit(np.asarray(x, dtype=np.float64))


def tanh(x) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=np.float64))


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] < 1:
        raise ValueError("softmax of an empty vector")
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


# names matching the vector-level operations
sigmoid_vec = sigmoid
tanh_vec = tanh
softmax_vec = softmax


def glorot_bound(rows: int, cols: int) -> float:
    return math.sqrt(6.0 / (rows + cols))


def glorot_init(rows: int, cols: int, rng: Rng) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"glorot_init needs positive shape, got ({rows}, {cols})")
    a = glorot_bound(rows, cols)
    return rng.uniform(-a, a, (rows, cols))

