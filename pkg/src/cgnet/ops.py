"""Layer primitives with explicit forward and backward passes.

Every backward function returns gradients for its inputs and parameters in
the order they appear in the forward signature. Functions are pure: caches
are returned to the caller rather than stored.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w) < 1:
            raise ShapeError(f"non-positive extent in {self}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeError(f"invalid stride/dilation/padding in {self}")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(f"channels not divisible by groups in {self}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    @property
    def channelwise(self):
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, h, w):
        ho = kernels.conv_out_size(h, self.kernel_h, self.stride, self.padding, self.dilation)
        wo = kernels.conv_out_size(w, self.kernel_w, self.stride, self.padding, self.dilation)
        return ho, wo


def _check_conv(x, w, spec):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"input {x.shape} does not match {spec}")
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"weight {w.shape} does not match {spec.weight_shape}")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(f"empty output for input {x.shape} and {spec}")
    return ho, wo


def conv2d_forward(x, w, b, spec):
    _check_conv(x, w, spec)
    if spec.has_bias and b is None:
        raise ShapeError("spec requires a bias")
    return kernels.conv2d(x, w, b if spec.has_bias else None,
                          spec.stride, spec.padding, spec.dilation, spec.groups)


def conv2d_backward(grad_out, x, w, spec):
    """Returns ``(grad_x, grad_w, grad_b)``; ``grad_b`` is None without bias."""
    ho, wo = _check_conv(x, w, spec)
    if grad_out.shape != (x.shape[0], spec.out_channels, ho, wo):
        raise ShapeError(f"grad_out {grad_out.shape} does not match forward output")
    args = (spec.stride, spec.padding, spec.dilation, spec.groups)
    gw, gb = kernels.conv2d_grad_weight(grad_out, x, w.shape, *args)
    gx = kernels.conv2d_grad_input(grad_out, w, x.shape, *args)
    return gx, gw, (gb if spec.has_bias else None)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def create(cls, channels, dtype=np.float32, **kw):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    invstd: np.ndarray
    gamma: np.ndarray = field(repr=False)


def batchnorm_forward(x, state):
    """Returns ``(out, cache)``; cache is None in infer mode.

    Train mode updates the running statistics in place.
    """
    if x.ndim != 4 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"input {x.shape} does not match {state.gamma.shape[0]} BN channels")
    shape = (1, -1, 1, 1)
    if state.mode == "infer":
        invstd = 1.0 / np.sqrt(state.running_var + state.eps)
        scale = (state.gamma * invstd).astype(x.dtype)
        shift = (state.beta - state.running_mean * scale).astype(x.dtype)
        return x * scale.reshape(shape) + shift.reshape(shape), None
    if state.mode != "train":
        raise ValueError(f"unknown BN mode {state.mode!r}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise ShapeError("train-mode batch norm needs at least 2 values per channel")
    mean = x.mean(axis=(0, 2, 3))
    xc = x - mean.reshape(shape)
    var = (xc * xc).mean(axis=(0, 2, 3))
    invstd = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = xc * invstd.reshape(shape)
    out = xhat * state.gamma.reshape(shape) + state.beta.reshape(shape)
    m = state.momentum
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    state.running_var[...] = (1 - m) * state.running_var + m * var
    return out, BatchNormCache(xhat, invstd, state.gamma)


def batchnorm_backward(grad_out, cache):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    if cache is None:
        raise ValueError("batch norm backward requires a train-mode forward")
    shape = (1, -1, 1, 1)
    count = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    gbeta = grad_out.sum(axis=(0, 2, 3))
    ggamma = (grad_out * cache.xhat).sum(axis=(0, 2, 3))
    k = (cache.gamma * cache.invstd / count).reshape(shape)
    gx = k * (count * grad_out - gbeta.reshape(shape) - cache.xhat * ggamma.reshape(shape))
    return gx.astype(grad_out.dtype), ggamma, gbeta


def prelu_forward(x, slope):
    if slope.shape != (x.shape[1],):
        raise ShapeError(f"{slope.shape[0]} slopes for {x.shape[1]} channels")
    return np.where(x > 0, x, x * slope.reshape(1, -1, 1, 1))


def prelu_backward(grad_out, x, slope):
    """Returns ``(grad_x, grad_slope)``; the subgradient at 0 is 0."""
    pos = x > 0
    gx = np.where(pos, grad_out, grad_out * slope.reshape(1, -1, 1, 1))
    gx[x == 0] = 0
    ga = np.where(pos, 0, grad_out * x).sum(axis=(0, 2, 3))
    return gx, ga.astype(slope.dtype)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise ShapeError("global average pooling expects rank 4")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out, x_shape):
    h, w = x_shape[2], x_shape[3]
    g = (grad_out / (h * w)).astype(grad_out.dtype)
    return np.broadcast_to(g[:, :, None, None], x_shape).copy()


def affine_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"affine mismatch: x {x.shape}, W {w.shape}, b {b.shape}")
    return x @ w.T + b


def affine_backward(grad_out, x, w):
    """Returns ``(grad_x, grad_w, grad_b)``."""
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def sigmoid_forward(x):
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid_backward(grad_out, y):
    return grad_out * y * (1 - y)


def _pool_taps(h, w):
    ho, wo = (h + 1) // 2, (w + 1) // 2
    for u in range(3):
        for v in range(3):
            yield (slice(u, u + 2 * (ho - 1) + 1, 2), slice(v, v + 2 * (wo - 1) + 1, 2))


def avg_pool3x3s2_forward(x):
    """3x3 window, stride 2, zero padding 1, divisor fixed at 9."""
    if x.ndim != 4:
        raise ShapeError("average pooling expects rank 4")
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, c, (h + 1) // 2, (w + 1) // 2), dtype=x.dtype)
    for su, sv in _pool_taps(h, w):
        out += xp[:, :, su, sv]
    return out / x.dtype.type(9)


def avg_pool3x3s2_backward(grad_out, x_shape):
    n, c, h, w = x_shape
    gp = np.zeros((n, c, h + 2, w + 2), dtype=grad_out.dtype)
    g = grad_out / grad_out.dtype.type(9)
    for su, sv in _pool_taps(h, w):
        gp[:, :, su, sv] += g
    return gp[:, :, 1:h + 1, 1:w + 1].copy()


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row i holds the linear weights sampling the input at ``(i+0.5)*n_in/n_out - 0.5``,
    clamped to ``[0, n_in-1]``."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    a = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1 - frac)
    np.add.at(a, (rows, i1), frac)
    return a.astype(dtype)


def resize_bilinear(x, out_h, out_w):
    """Separable bilinear resampling of the last two axes."""
    ah = interp_matrix(x.shape[-2], out_h, x.dtype)
    aw = interp_matrix(x.shape[-1], out_w, x.dtype)
    return ah @ x @ aw.T


def bilinear_upsample_forward(x, factor):
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


def bilinear_upsample_backward(grad_out, factor, x_shape):
    if factor == 1:
        return grad_out.copy()
    ah = interp_matrix(x_shape[2], grad_out.shape[2], grad_out.dtype)
    aw = interp_matrix(x_shape[3], grad_out.shape[3], grad_out.dtype)
    return ah.T @ grad_out @ aw


def softmax_ce_masked(scores, labels, ignore_index=255, reduction="mean"):
    """Pixelwise softmax cross-entropy over non-ignored labels.

    Returns ``(loss, grad_scores)``. ``reduction`` is ``"mean"`` (over valid
    pixels) or ``"sum"``.
    """
    if scores.ndim != 4 or labels.shape != (scores.shape[0],) + scores.shape[2:]:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} disagree")
    k = scores.shape[1]
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} outside [0, {k}) and not ignore_index")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("every pixel is ignored; loss is undefined")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    prob = e / z
    logp = shifted - np.log(z)
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -float(np.sum(picked[valid], dtype=np.float64))
    grad = prob
    np.put_along_axis(grad, safe[:, None],
                      np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
    grad *= valid[:, None]
    if reduction == "mean":
        loss /= count
        grad /= scores.dtype.type(count)
    return loss, grad.astype(scores.dtype)
