"""Tensor helpers and the PCG32 generator.

Tensors are plain C-contiguous numpy arrays of rank 1..4 in N,C,H,W order.
The helpers here validate shapes the way the rest of the package expects and
keep the channel-wise primitives (concatenation, re-weighting) in one place.
"""

import math
import os

import numpy as np

from ._jit import JIT_ENABLED, njit
from .errors import NonFiniteError, ShapeError

DEBUG = os.environ.get("CGNET_DEBUG", "") not in ("", "0")

_MASK64 = (1 << 64) - 1
_PCG_MULT = 6364136223846793005
_DEFAULT_STREAM = 0xDA3E39CB94B95BDB


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def _checked(x):
    if DEBUG:
        check_finite(x)
    return x


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 4:
        raise ShapeError(f"rank must be 1..4, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all extents must be >= 1, got {dims}")
    return dims


def zeros(dims, dtype=np.float32):
    return np.zeros(_check_dims(dims), dtype=dtype)


def full(dims, value, dtype=np.float32):
    return np.full(_check_dims(dims), value, dtype=dtype)


def concat_channels(a, b):
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects rank-4 tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return _checked(np.concatenate([a, b], axis=1))


def split_channels(x, *sizes):
    """Inverse of repeated :func:`concat_channels`; returns contiguous parts."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"channel sizes {sizes} do not sum to {x.shape[1]}")
    parts, start = [], 0
    for c in sizes:
        parts.append(np.ascontiguousarray(x[:, start:start + c]))
        start += c
    return parts


def scale_channels(x, g):
    """``out[n,c,h,w] = x[n,c,h,w] * g[n,c]``."""
    if x.ndim != 4 or g.ndim != 2 or g.shape != x.shape[:2]:
        raise ShapeError(f"cannot scale {x.shape} by gate {g.shape}")
    return _checked(x * g[:, :, None, None])


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return _checked(a + b)


@njit(cache=True)
def _pcg_fill_jit(state, inc, out):
    mult = np.uint64(_PCG_MULT)
    m32 = np.uint64(0xFFFFFFFF)
    for k in range(out.shape[0]):
        old = state
        state = old * mult + inc
        xs = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)) & m32
        rot = old >> np.uint64(59)
        out[k] = ((xs >> rot) | (xs << ((np.uint64(32) - rot) & np.uint64(31)))) & m32
    return state


def _pcg_fill_py(state, inc, out):
    for k in range(out.shape[0]):
        old = state
        state = (old * _PCG_MULT + inc) & _MASK64
        xs = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        out[k] = ((xs >> rot) | (xs << ((-rot) & 31))) & 0xFFFFFFFF
    return state


class Pcg32:
    """PCG-XSH-RR 64/32 (O'Neill's ``pcg32``), seeded like ``pcg32_srandom``.

    ``stream`` selects one of 2**63 independent sequences for the same seed.
    """

    def __init__(self, seed, stream=_DEFAULT_STREAM):
        self.inc = ((int(stream) << 1) | 1) & _MASK64
        self.state = 0
        self._step()
        self.state = (self.state + (int(seed) & _MASK64)) & _MASK64
        self._step()

    def _step(self):
        self.state = (self.state * _PCG_MULT + self.inc) & _MASK64

    def next_u32(self):
        old = self.state
        self._step()
        xs = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xs >> rot) | (xs << ((-rot) & 31))) & 0xFFFFFFFF

    def u32(self, n):
        out = np.empty(n, dtype=np.uint64)
        if n == 0:
            return out.astype(np.uint32)
        if JIT_ENABLED:
            self.state = int(_pcg_fill_jit(np.uint64(self.state), np.uint64(self.inc), out))
        else:
            self.state = _pcg_fill_py(self.state, self.inc, out)
        return out.astype(np.uint32)

    def uniform(self, n=None):
        """Uniform doubles in [0, 1): ``u32 / 2**32``."""
        if n is None:
            return self.next_u32() / 4294967296.0
        return self.u32(n).astype(np.float64) / 4294967296.0

    def randint(self, lo, hi):
        """Integer in ``[lo, hi)``."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        return lo + min(int(self.uniform() * (hi - lo)), hi - lo - 1)

    def choice(self, seq):
        return seq[self.randint(0, len(seq))]

    def getstate(self):
        return self.state, self.inc

    def setstate(self, st):
        self.state, self.inc = (int(v) & _MASK64 for v in st)


def rand_normal(rng, dims, mean=0.0, std=1.0, dtype=np.float32):
    """Gaussian samples via Box-Muller; consumes ``2*ceil(n/2)`` draws."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    dims = _check_dims(dims)
    n = math.prod(dims)
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs)
    r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
    theta = 2.0 * math.pi * u[1::2]
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return (mean + std * z[:n]).reshape(dims).astype(dtype)
