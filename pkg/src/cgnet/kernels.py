"""Direct 2-D convolution kernels (NCHW, grouped, strided, dilated).

Two interchangeable back ends share one calling convention:

* numba: one loop nest per output element block, parallel over independent
  output planes. Every output element accumulates its terms in a fixed
  lexicographic order, so results are bitwise identical at any thread count.
* numpy: per-tap channel contractions with ``einsum``; used when
  ``CGNET_DISABLE_JIT`` is set. Results agree with the numba path to rounding
  but are not bitwise equal to it.

All functions take ``stride``, ``padding``, ``dilation`` and ``groups`` as ints
and allocate their outputs.
"""

import numpy as np

from ._jit import JIT_ENABLED, njit, prange


def conv_out_size(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


# The numba kernels read from (and scatter into) zero-padded buffers so every
# index is a non-negative affine function of loop counters. Offsets are held in
# uint64 so numba can drop its negative-index wraparound checks, which would
# otherwise block vectorisation of the innermost loop.


@njit(parallel=True, cache=True)
def _fwd_nb(xp, w, b, out, s, d, groups):
    N = xp.shape[0]
    O, cpg, KH, KW = w.shape
    Ho, Wo = out.shape[2], out.shape[3]
    opg = O // groups
    us = np.uint64(s)
    for t in prange(N * O):
        n = t // O
        o = t % O
        g = o // opg
        bo = b[o]
        for i in range(Ho):
            for j in range(Wo):
                out[n, o, i, j] = bo
        for cc in range(cpg):
            c = g * cpg + cc
            for u in range(KH):
                ud = np.uint64(u * d)
                for v in range(KW):
                    vd = np.uint64(v * d)
                    wv = w[o, cc, u, v]
                    if s == 1:
                        for i in range(Ho):
                            for j in range(Wo):
                                out[n, o, i, j] += wv * xp[n, c, np.uint64(i) + ud, np.uint64(j) + vd]
                    else:
                        for i in range(Ho):
                            for j in range(Wo):
                                out[n, o, i, j] += wv * xp[n, c, np.uint64(i) * us + ud, np.uint64(j) * us + vd]


@njit(parallel=True, cache=True)
def _bwd_w_nb(g, xp, gw, gb, s, d, groups):
    # Each weight gradient sums over (n, i) into per-column partials, then
    # folds the partials left to right: a fixed order that still vectorises.
    N = xp.shape[0]
    O, cpg, KH, KW = gw.shape
    Ho, Wo = g.shape[2], g.shape[3]
    opg = O // groups
    us = np.uint64(s)
    for o in prange(O):
        grp = o // opg
        part = np.zeros(Wo, dtype=g.dtype)
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    part[j] += g[n, o, i, j]
        tot = 0.0
        for j in range(Wo):
            tot += part[j]
        gb[o] = tot
        for cc in range(cpg):
            c = grp * cpg + cc
            for u in range(KH):
                ud = np.uint64(u * d)
                for v in range(KW):
                    vd = np.uint64(v * d)
                    part[:] = 0
                    for n in range(N):
                        if s == 1:
                            for i in range(Ho):
                                for j in range(Wo):
                                    part[j] += g[n, o, i, j] * xp[n, c, np.uint64(i) + ud, np.uint64(j) + vd]
                        else:
                            for i in range(Ho):
                                for j in range(Wo):
                                    part[j] += g[n, o, i, j] * xp[n, c, np.uint64(i) * us + ud, np.uint64(j) * us + vd]
                    acc = 0.0
                    for j in range(Wo):
                        acc += part[j]
                    gw[o, cc, u, v] = acc


@njit(parallel=True, cache=True)
def _bwd_x_nb(g, w, gxp, s, d, groups):
    N, C = gxp.shape[0], gxp.shape[1]
    O, cpg, KH, KW = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    opg = O // groups
    us = np.uint64(s)
    for t in prange(N * C):
        n = t // C
        c = t % C
        grp = c // cpg
        cc = c % cpg
        for oo in range(opg):
            o = grp * opg + oo
            for u in range(KH):
                ud = np.uint64(u * d)
                for v in range(KW):
                    vd = np.uint64(v * d)
                    wv = w[o, cc, u, v]
                    if s == 1:
                        for i in range(Ho):
                            for j in range(Wo):
                                gxp[n, c, np.uint64(i) + ud, np.uint64(j) + vd] += wv * g[n, o, i, j]
                    else:
                        for i in range(Ho):
                            for j in range(Wo):
                                gxp[n, c, np.uint64(i) * us + ud, np.uint64(j) * us + vd] += wv * g[n, o, i, j]


def _tap(xp, u, v, d, s, Ho, Wo):
    return xp[:, :, u * d: u * d + s * (Ho - 1) + 1: s, v * d: v * d + s * (Wo - 1) + 1: s]


def _fwd_np(xp, w, b, out, s, d, groups):
    N = xp.shape[0]
    O, cpg, KH, KW = w.shape
    Ho, Wo = out.shape[2:]
    opg = O // groups
    acc = out.reshape(N, groups, opg, Ho, Wo)
    acc[...] = b.reshape(1, groups, opg, 1, 1)
    wg = w.reshape(groups, opg, cpg, KH, KW)
    for u in range(KH):
        for v in range(KW):
            xs = _tap(xp, u, v, d, s, Ho, Wo).reshape(N, groups, cpg, Ho, Wo)
            acc += np.einsum("ngchw,goc->ngohw", xs, wg[..., u, v])


def _bwd_w_np(g, xp, gw, gb, s, d, groups):
    N = xp.shape[0]
    O, cpg, KH, KW = gw.shape
    Ho, Wo = g.shape[2:]
    opg = O // groups
    g5 = g.reshape(N, groups, opg, Ho, Wo)
    gwg = gw.reshape(groups, opg, cpg, KH, KW)
    for u in range(KH):
        for v in range(KW):
            xs = _tap(xp, u, v, d, s, Ho, Wo).reshape(N, groups, cpg, Ho, Wo)
            gwg[..., u, v] = np.einsum("ngohw,ngchw->goc", g5, xs)
    gb[...] = g.sum(axis=(0, 2, 3))


def _bwd_x_np(g, w, gxp, s, d, groups):
    N, C = gxp.shape[:2]
    O, cpg, KH, KW = w.shape
    Ho, Wo = g.shape[2:]
    opg = O // groups
    g5 = g.reshape(N, groups, opg, Ho, Wo)
    wg = w.reshape(groups, opg, cpg, KH, KW)
    for u in range(KH):
        for v in range(KW):
            contrib = np.einsum("ngohw,goc->ngchw", g5, wg[..., u, v])
            _tap(gxp, u, v, d, s, Ho, Wo)[...] += contrib.reshape(N, C, Ho, Wo)


if JIT_ENABLED:
    _fwd, _bwd_w, _bwd_x = _fwd_nb, _bwd_w_nb, _bwd_x_nb
else:
    _fwd, _bwd_w, _bwd_x = _fwd_np, _bwd_w_np, _bwd_x_np


def _pad(x, p):
    x = np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def conv2d(x, w, b, stride, padding, dilation, groups, backend=None):
    """Forward convolution. ``b`` may be None."""
    N, C, H, W = x.shape
    O, _, KH, KW = w.shape
    Ho = conv_out_size(H, KH, stride, padding, dilation)
    Wo = conv_out_size(W, KW, stride, padding, dilation)
    out = np.empty((N, O, Ho, Wo), dtype=x.dtype)
    bias = np.zeros(O, dtype=x.dtype) if b is None else np.ascontiguousarray(b, dtype=x.dtype)
    fn = _select(backend, _fwd_nb, _fwd_np, _fwd)
    fn(_pad(x, padding), np.ascontiguousarray(w, dtype=x.dtype), bias, out, stride, dilation, groups)
    return out


def conv2d_grad_weight(g, x, w_shape, stride, padding, dilation, groups, backend=None):
    """Returns ``(grad_w, grad_b)``."""
    gw = np.empty(w_shape, dtype=x.dtype)
    gb = np.empty(w_shape[0], dtype=x.dtype)
    fn = _select(backend, _bwd_w_nb, _bwd_w_np, _bwd_w)
    fn(np.ascontiguousarray(g, dtype=x.dtype), _pad(x, padding), gw, gb, stride, dilation, groups)
    return gw, gb


def conv2d_grad_input(g, w, x_shape, stride, padding, dilation, groups, backend=None):
    N, C, H, W = x_shape
    p = padding
    gxp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=g.dtype)
    fn = _select(backend, _bwd_x_nb, _bwd_x_np, _bwd_x)
    fn(np.ascontiguousarray(g), np.ascontiguousarray(w, dtype=g.dtype), gxp, stride, dilation, groups)
    return np.ascontiguousarray(gxp[:, :, p:p + H, p:p + W]) if p else gxp


def _select(backend, nb_fn, np_fn, default):
    if backend is None:
        return default
    if backend == "numpy":
        return np_fn
    if backend == "numba":
        return nb_fn
    raise ValueError(f"unknown backend {backend!r}")
