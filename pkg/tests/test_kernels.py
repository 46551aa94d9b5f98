import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgnet import kernels
from cgnet._jit import JIT_ENABLED

from conftest import run_python

BACKENDS = ["numba", "numpy"] if JIT_ENABLED else ["numpy"]


def conv_oracle(x, w, b, s, p, d, groups):
    """Direct nested loops over every output element."""
    n_, c_, h, wd = x.shape
    o_, cpg, kh, kw = w.shape
    ho = (h + 2 * p - d * (kh - 1) - 1) // s + 1
    wo = (wd + 2 * p - d * (kw - 1) - 1) // s + 1
    opg = o_ // groups
    out = np.zeros((n_, o_, ho, wo))
    for n in range(n_):
        for o in range(o_):
            g = o // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for cc in range(cpg):
                        c = g * cpg + cc
                        for u in range(kh):
                            for v in range(kw):
                                y, xx = i * s - p + u * d, j * s - p + v * d
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += w[o, cc, u, v] * x[n, c, y, xx]
                    out[n, o, i, j] = acc
    return out


conv_shapes = st.tuples(
    st.integers(1, 2),            # N
    st.sampled_from([1, 2, 4]),   # groups
    st.integers(1, 2),            # in-channels per group
    st.integers(1, 2),            # out-channels per group
    st.integers(3, 9),            # H
    st.integers(3, 9),            # W
    st.sampled_from([1, 3]),      # kernel
    st.integers(1, 2),            # stride
    st.integers(0, 4),            # padding
    st.sampled_from([1, 2, 4]),   # dilation
)


def _case(shape, seed=0):
    n, g, cpg, opg, h, w, k, s, p, d = shape
    if (h + 2 * p - d * (k - 1) - 1) < 0 or (w + 2 * p - d * (k - 1) - 1) < 0:
        return None
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, g * cpg, h, w))
    wt = rng.standard_normal((g * opg, cpg, k, k))
    b = rng.standard_normal(g * opg)
    return x, wt, b, s, p, d, g


@pytest.mark.parametrize("backend", BACKENDS)
@settings(max_examples=40, deadline=None)
@given(shape=conv_shapes)
def test_forward_matches_oracle(backend, shape):
    case = _case(shape)
    if case is None:
        return
    x, w, b, s, p, d, g = case
    got = kernels.conv2d(x, w, b, s, p, d, g, backend=backend)
    np.testing.assert_allclose(got, conv_oracle(x, w, b, s, p, d, g), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
@settings(max_examples=40, deadline=None)
@given(shape=conv_shapes)
def test_backward_is_adjoint(backend, shape):
    """<conv(x), g> == <x, grad_x(g)> and == <w, grad_w(g)> (conv is bilinear)."""
    case = _case(shape, seed=1)
    if case is None:
        return
    x, w, _, s, p, d, g = case
    out = kernels.conv2d(x, w, None, s, p, d, g, backend=backend)
    go = np.random.default_rng(2).standard_normal(out.shape)
    gx = kernels.conv2d_grad_input(go, w, x.shape, s, p, d, g, backend=backend)
    gw, gb = kernels.conv2d_grad_weight(go, x, w.shape, s, p, d, g, backend=backend)
    lhs = float(np.sum(out * go))
    assert np.isclose(lhs, float(np.sum(x * gx)), rtol=1e-10, atol=1e-10)
    assert np.isclose(lhs, float(np.sum(w * gw)), rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(gb, go.sum(axis=(0, 2, 3)), rtol=1e-12, atol=1e-12)


def test_dilated_center_example():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    w = np.ones((1, 1, 3, 3))
    out = kernels.conv2d(x, w, None, 1, 2, 2, 1)
    assert out[0, 0, 2, 2] == 108.0


@pytest.mark.skipif(not JIT_ENABLED, reason="needs the numba back end")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(dtype):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 8, 12, 12)).astype(dtype)
    w = rng.standard_normal((8, 1, 3, 3)).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    a = kernels.conv2d(x, w, None, 1, 2, 2, 8, backend="numba")
    b = kernels.conv2d(x, w, None, 1, 2, 2, 8, backend="numpy")
    np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
    go = rng.standard_normal(a.shape).astype(dtype)
    for fa, fb in zip(kernels.conv2d_grad_weight(go, x, w.shape, 1, 2, 2, 8, backend="numba"),
                      kernels.conv2d_grad_weight(go, x, w.shape, 1, 2, 2, 8, backend="numpy")):
        np.testing.assert_allclose(fa, fb, rtol=tol * 10, atol=tol * 10)
    np.testing.assert_allclose(kernels.conv2d_grad_input(go, w, x.shape, 1, 2, 2, 8, backend="numba"),
                               kernels.conv2d_grad_input(go, w, x.shape, 1, 2, 2, 8, backend="numpy"),
                               rtol=tol, atol=tol)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.conv2d(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 1, 1)), None, 1, 0, 1, 1, backend="cuda")


THREAD_PROBE = """
import hashlib, numpy as np
from cgnet import kernels
rng = np.random.default_rng(0)
x = rng.standard_normal((3, 16, 20, 20)).astype(np.float32)
w = rng.standard_normal((32, 16, 3, 3)).astype(np.float32)
out = kernels.conv2d(x, w, None, 2, 1, 1, 1)
go = rng.standard_normal(out.shape).astype(np.float32)
gw, gb = kernels.conv2d_grad_weight(go, x, w.shape, 2, 1, 1, 1)
gx = kernels.conv2d_grad_input(go, w, x.shape, 2, 1, 1, 1)
h = hashlib.sha256()
for a in (out, gw, gb, gx):
    h.update(a.tobytes())
print(h.hexdigest())
"""


@pytest.mark.skipif(not JIT_ENABLED, reason="needs the numba back end")
def test_bitwise_identical_across_thread_counts():
    digests = {run_python(THREAD_PROBE, {"NUMBA_NUM_THREADS": "4", "CGNET_THREADS": str(t)}).strip()
               for t in (1, 2, 4)}
    assert len(digests) == 1
