import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgnet import ops
from cgnet.errors import ShapeError
from cgnet.ops import BatchNormState, ConvSpec


def test_convspec_validation():
    assert ConvSpec(4, 4, groups=4).channelwise
    assert not ConvSpec(4, 8, groups=4).channelwise
    for bad in (dict(groups=3), dict(stride=0), dict(dilation=0), dict(padding=-1)):
        with pytest.raises(ShapeError):
            ConvSpec(4, 4, **bad)


def test_identity_1x1_conv():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    spec = ConvSpec(3, 3, 1, 1)
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = ops.conv2d_forward(x, w, None, spec)
    assert np.array_equal(out, x)
    gx, gw, gb = ops.conv2d_backward(np.ones_like(out), x, w, spec)
    assert np.array_equal(gx, np.ones_like(x)) and gb is None


def test_zero_weight_bias_map():
    spec = ConvSpec(2, 3, 3, 3, padding=1, has_bias=True)
    out = ops.conv2d_forward(np.ones((1, 2, 4, 4)), np.zeros(spec.weight_shape), np.array([1.0, 2.0, 3.0]), spec)
    assert all((out[0, c] == c + 1).all() for c in range(3))


def test_conv_zero_grad():
    spec = ConvSpec(2, 2, 3, 3, padding=1, has_bias=True)
    x = np.ones((1, 2, 4, 4))
    gx, gw, gb = ops.conv2d_backward(np.zeros((1, 2, 4, 4)), x, np.ones(spec.weight_shape), spec)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_errors():
    spec = ConvSpec(2, 2, 3, 3)
    with pytest.raises(ShapeError):
        ops.conv2d_forward(np.ones((1, 3, 5, 5)), np.ones(spec.weight_shape), None, spec)
    with pytest.raises(ShapeError):
        ops.conv2d_forward(np.ones((1, 2, 2, 2)), np.ones(spec.weight_shape), None, spec)


def test_channelwise_isolation():
    rng = np.random.default_rng(1)
    spec = ConvSpec(4, 4, 3, 3, padding=2, dilation=2, groups=4)
    x = rng.standard_normal((1, 4, 7, 7))
    w = rng.standard_normal(spec.weight_shape)
    base = ops.conv2d_forward(x, w, None, spec)
    x2 = x.copy()
    x2[0, 2] += 1.0
    diff = ops.conv2d_forward(x2, w, None, spec) - base
    changed = [c for c in range(4) if np.abs(diff[0, c]).max() > 0]
    assert changed == [2]


def test_conv_linearity():
    rng = np.random.default_rng(2)
    spec = ConvSpec(3, 2, 3, 3, padding=1, has_bias=True)
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(2)
    x1, x2 = rng.standard_normal((2, 1, 3, 6, 6))
    lhs = ops.conv2d_forward(x1 + x2, w, b, spec)
    rhs = ops.conv2d_forward(x1, w, b, spec) + ops.conv2d_forward(x2, w, b, spec) - b.reshape(1, -1, 1, 1)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 20), k=st.sampled_from([1, 3]), s=st.integers(1, 3), p=st.integers(0, 4),
       d=st.sampled_from([1, 2, 4]))
def test_output_size_formula(h, k, s, p, d):
    ho = (h + 2 * p - d * (k - 1) - 1) // s + 1
    spec = ConvSpec(1, 1, k, k, stride=s, padding=p, dilation=d)
    if ho < 1:
        with pytest.raises(ShapeError):
            ops.conv2d_forward(np.ones((1, 1, h, h)), np.ones(spec.weight_shape), None, spec)
    else:
        assert ops.conv2d_forward(np.ones((1, 1, h, h)), np.ones(spec.weight_shape), None, spec).shape[2:] == (ho, ho)


def test_bn_constant_input():
    st_ = BatchNormState.create(2, np.float64)
    out, _ = ops.batchnorm_forward(np.full((2, 2, 3, 3), 7.0), st_)
    assert np.abs(out).max() <= 1e-6


def test_bn_infer_identity():
    st_ = BatchNormState.create(3, np.float64, eps=1e-12, mode="infer")
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    out, cache = ops.batchnorm_forward(x, st_)
    np.testing.assert_allclose(out, x, atol=1e-9)
    assert cache is None
    with pytest.raises(ValueError):
        ops.batchnorm_backward(np.ones_like(x), cache)


def test_bn_two_values():
    st_ = BatchNormState.create(1, np.float64)
    out, _ = ops.batchnorm_forward(np.array([1.0, 3.0]).reshape(1, 1, 1, 2), st_)
    np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-4)
    # running stats: biased variance 1, mean 2
    np.testing.assert_allclose(st_.running_mean, [0.2])
    np.testing.assert_allclose(st_.running_var, [0.9 + 0.1 * 1.0])


def test_bn_backward_simple():
    st_ = BatchNormState.create(2, np.float64)
    x = np.random.default_rng(3).standard_normal((2, 2, 3, 3))
    _, cache = ops.batchnorm_forward(x, st_)
    gx, gg, gb = ops.batchnorm_backward(np.zeros_like(x), cache)
    assert not gx.any() and not gg.any() and not gb.any()
    g = np.random.default_rng(4).standard_normal(x.shape)
    _, _, gb = ops.batchnorm_backward(g, cache)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)))


def test_bn_single_value_error():
    with pytest.raises(ShapeError):
        ops.batchnorm_forward(np.ones((1, 2, 1, 1)), BatchNormState.create(2))


def test_prelu():
    a = np.array([0.25])
    x = np.array([2.0, -2.0, 0.0]).reshape(1, 1, 1, 3)
    assert ops.prelu_forward(x, a).ravel().tolist() == [2.0, -0.5, 0.0]
    assert ops.prelu_forward(x, np.zeros(1)).ravel().tolist() == [2.0, 0.0, 0.0]
    gx, ga = ops.prelu_backward(np.ones_like(x), x, a)
    assert gx.ravel().tolist() == [1.0, 0.25, 0.0]
    assert ga.tolist() == [-2.0]
    with pytest.raises(ShapeError):
        ops.prelu_forward(x, np.ones(2))


def test_relu():
    x = np.array([-1.0, 0.0, 2.0])
    assert ops.relu_forward(x).tolist() == [0.0, 0.0, 2.0]
    assert ops.relu_backward(np.ones(3), x).tolist() == [0.0, 0.0, 1.0]


def test_global_avg_pool():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    assert ops.global_avg_pool_forward(x).tolist() == [[2.5]]
    assert ops.global_avg_pool_backward(np.ones((1, 1)), x.shape).ravel().tolist() == [0.25] * 4
    assert ops.global_avg_pool_forward(np.full((2, 3, 4, 5), 7.0)).tolist() == [[7.0] * 3] * 2


def test_affine():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(ops.affine_forward(x, np.eye(4), np.zeros(4)), x)
    b = np.arange(2.0)
    assert ops.affine_forward(np.zeros((2, 4)), np.ones((2, 4)), b).tolist() == [[0.0, 1.0]] * 2
    with pytest.raises(ShapeError):
        ops.affine_forward(x, np.ones((2, 5)), b)


def test_sigmoid():
    assert ops.sigmoid_forward(np.array([0.0]))[0] == 0.5
    sat = ops.sigmoid_forward(np.array([40.0, -40.0]))
    assert np.isfinite(sat).all() and sat[0] == pytest.approx(1.0) and sat[1] == pytest.approx(0.0, abs=1e-17)
    y = ops.sigmoid_forward(np.array([0.0]))
    assert ops.sigmoid_backward(np.ones(1), y)[0] == 0.25


def test_avg_pool():
    assert ops.avg_pool3x3s2_forward(np.ones((1, 1, 2, 2))).ravel().tolist() == [pytest.approx(4 / 9)]
    out = ops.avg_pool3x3s2_forward(np.full((1, 1, 7, 7), 9.0))
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out[0, 0, 1:3, 1:3], 9.0)
    assert (out[0, 0, 0, :] < 9.0).all()


def test_upsample():
    x = np.array([0.0, 1.0]).reshape(1, 1, 1, 2)
    np.testing.assert_allclose(ops.bilinear_upsample_forward(x, 2)[0, 0, 0], [0, 0.25, 0.75, 1])
    y = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
    assert np.array_equal(ops.bilinear_upsample_forward(y, 1), y)
    np.testing.assert_allclose(ops.bilinear_upsample_forward(np.full((1, 1, 3, 2), 5.0), 8), 5.0)
    with pytest.raises(ValueError):
        ops.bilinear_upsample_forward(y, 0)


def test_upsample_backward_is_transpose():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 3, 4))
    g = rng.standard_normal((2, 3, 24, 32))
    lhs = np.sum(ops.bilinear_upsample_forward(x, 8) * g)
    rhs = np.sum(x * ops.bilinear_upsample_backward(g, 8, x.shape))
    assert np.isclose(lhs, rhs, rtol=1e-12)


def test_ce_uniform():
    loss, _ = ops.softmax_ce_masked(np.zeros((1, 19, 4, 4)), np.arange(16).reshape(1, 4, 4) % 19)
    assert abs(loss - math.log(19)) < 1e-6


def test_ce_scalar_case():
    scores = np.array([0.0, math.log(3)]).reshape(1, 2, 1, 1)
    loss, grad = ops.softmax_ce_masked(scores, np.array([[[1]]]))
    assert loss == pytest.approx(-math.log(0.75), abs=1e-12)
    np.testing.assert_allclose(grad.ravel(), [0.25, -0.25], atol=1e-12)


def test_ce_errors_and_ignore():
    with pytest.raises(ValueError, match="ignored"):
        ops.softmax_ce_masked(np.zeros((1, 3, 2, 2)), np.full((1, 2, 2), 255))
    with pytest.raises(ValueError):
        ops.softmax_ce_masked(np.zeros((1, 3, 2, 2)), np.full((1, 2, 2), 3))
    labels = np.array([[[0, 255], [1, 2]]])
    _, grad = ops.softmax_ce_masked(np.random.default_rng(0).standard_normal((1, 3, 2, 2)), labels)
    assert not grad[0, :, 0, 1].any()


def test_ce_sum_reduction():
    rng = np.random.default_rng(2)
    s = rng.standard_normal((2, 3, 2, 2))
    y = rng.integers(0, 3, (2, 2, 2))
    lm, gm = ops.softmax_ce_masked(s, y, reduction="mean")
    ls, gs = ops.softmax_ce_masked(s, y, reduction="sum")
    assert ls == pytest.approx(8 * lm)
    np.testing.assert_allclose(gs, 8 * gm)


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_ce_shift_invariance(shift, seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((1, 4, 3, 3))
    y = rng.integers(0, 4, (1, 3, 3))
    a, _ = ops.softmax_ce_masked(s, y)
    b, _ = ops.softmax_ce_masked(s + shift, y)
    assert b == pytest.approx(a, rel=1e-6)
