"""Numeric foundations: arrays, deterministic randomness, elementary
differentiable operations, and the finite-difference gradient checker.

Every value carrier in the package is a C-order ``numpy`` array of float64
("dense array"); this module fixes that convention and provides the few
scalar/vector primitives the loss and network modules build on, each with a
hand-derived backward companion.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_KEY_OFFSET = 0x243F6A8885A308D3


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 output function on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
    return z ^ (z >> np.uint64(31))


def _fold(part) -> int:
    if isinstance(part, str):
        return int.from_bytes(
            hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest(), "little"
        )
    return int(part) & _MASK64


def mix_key(*parts) -> int:
    """Collapse integers and/or string labels into one 64-bit stream key.

    Used to derive independent substreams (e.g. per-epoch shuffles, per-view
    augmentation draws) from a master seed without shared state.
    """
    acc = _KEY_OFFSET
    for part in parts:
        acc = (acc + _fold(part)) & _MASK64
        acc = int(_mix64(np.array([acc], dtype=np.uint64))[0])
    return acc


class Rng:
    """Counter-based SplitMix64 stream.

    Draw ``i`` of a stream with key ``k`` is ``mix64(k + (i+1)*GOLDEN)``, so an
    equal seed yields an identical sequence on every platform, and the whole
    state serializes as two integers (key, draws taken). Instances are cheap;
    derive throwaway substreams with :meth:`substream` instead of sharing one
    generator across owners.
    """

    __slots__ = ("_key", "_count")

    def __init__(self, seed: int, count: int = 0):
        self._key = int(seed) & _MASK64
        self._count = int(count)

    # -- state ---------------------------------------------------------------

    @property
    def state(self) -> tuple[int, int]:
        return (self._key, self._count)

    @classmethod
    def from_state(cls, state: tuple[int, int]) -> "Rng":
        return cls(state[0], state[1])

    def substream(self, *label) -> "Rng":
        """A fresh, statistically independent stream keyed off this seed."""
        return Rng(mix_key(self._key, *label))

    # -- raw draws -----------------------------------------------------------

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` uint64 words of the stream."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        words = idx * np.uint64(_GOLDEN) + np.uint64(self._key)
        return _mix64(words)

    # -- distributions ---------------------------------------------------------

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        """Uniform floats in [low, high); scalar when size is None."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = low + (high - low) * u
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        """Gaussian draws via Box-Muller (deterministic, platform-independent)."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(size=m)  # (0, 1]: keeps log() finite
        u2 = self.uniform(size=m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = loc + scale * z
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high), bias-free via rejection."""
        span = int(high) - int(low)
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        n = 1 if size is None else int(np.prod(size))
        # reject draws >= limit; limit - 1 stays representable even when the
        # span divides 2**64 exactly
        limit = ((1 << 64) // span) * span
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            words = self.raw(n - filled)
            ok = words <= np.uint64(limit - 1)
            accepted = (words[ok] % np.uint64(span)).astype(np.int64) + low
            out[filled : filled + accepted.size] = accepted
            filled += accepted.size
        if size is None:
            return int(out[0])
        return out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n) (stable argsort of raw draws)."""
        return np.argsort(self.raw(n), kind="stable")

    def shuffled(self, seq: Sequence) -> list:
        return [seq[i] for i in self.permutation(len(seq))]


# -- elementary differentiable operations -------------------------------------


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shapes do not chain: {a.shape} x {b.shape}"
        )
    return a @ b


def matmul_backward(grad_out: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of sum(grad_out * (a @ b)) w.r.t. both factors."""
    if grad_out.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(
            f"matmul grad shape {grad_out.shape} does not match output "
            f"({a.shape[0]}, {b.shape[1]})"
        )
    return grad_out @ b.T, a.T @ grad_out


def _checked_norm(v: np.ndarray, name: str) -> float:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateInputError(f"{name} has zero norm")
    return n


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v); range [0, 2]. Zero-norm inputs are an error, not an
    epsilon: silent smoothing would hide embedding collapse."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"cosine_distance shapes differ: {u.shape} vs {v.shape}")
    nu = _checked_norm(u, "first vector")
    nv = _checked_norm(v, "second vector")
    return 1.0 - float(u @ v) / (nu * nv)


def cosine_distance_backward(u: np.ndarray, v: np.ndarray, grad: float = 1.0):
    """Gradients of grad * cosine_distance(u, v) w.r.t. u and v."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu = _checked_norm(u, "first vector")
    nv = _checked_norm(v, "second vector")
    uh = u / nu
    vh = v / nv
    c = float(uh @ vh)
    du = -grad * (vh - c * uh) / nu
    dv = -grad * (uh - c * vh) / nv
    return du, dv


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis; rows sum to 1."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    """Logistic function, stable for large |x|; accepts scalars or arrays."""
    z = np.asarray(x, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out)
    return out


# -- finite-difference gradient checking --------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    max_relative_error: float
    worst_coordinate: int
    passed: bool


def finite_diff_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    tolerance: float,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare the analytic gradient of a scalar function against central
    differences.

    ``f`` maps an array to ``(value, gradient)`` where the gradient has x's
    shape. Per-coordinate relative error uses a
    ``max(|analytic|, |numeric|, 1e-8)`` denominator. A non-finite analytic
    gradient fails immediately.
    """
    x = as_f64(x)
    _, grad = f(x)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise DimensionError(
            f"gradient shape {grad.shape} does not match input shape {x.shape}"
        )
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad.ravel()))[0])
        return GradCheckReport(float("inf"), bad, False)
    worst = 0.0
    worst_i = 0
    flat_grad = grad.ravel()
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += step
        fp = float(f(xp)[0])
        xm = x.copy()
        xm.flat[i] -= step
        fm = float(f(xm)[0])
        numeric = (fp - fm) / (2.0 * step)
        analytic = float(flat_grad[i])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        if rel > worst:
            worst = rel
            worst_i = i
    return GradCheckReport(worst, worst_i, worst <= tolerance)
