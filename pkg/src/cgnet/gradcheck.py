"""Finite-difference verification of every backward pass.

Each check builds the scalar ``L = sum(R * f(x))`` for a fixed random ``R``
(or uses the loss directly for cross-entropy and the full network), compares
the analytic gradient of every input and parameter against central
differences in float64, and records the per-tensor error

    max_i |a_i - n_i| / max(1, |a_i| + |n_i|)

i.e. relative for large entries and absolute for small ones. Entry ``i`` is
perturbed by ``h = STEP * max(1, |theta_i|)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .layers import Affine, BatchNorm2d, Conv2d, GlobalContext, ParamStore, PReLU, ReLU
from .model import CGBlock, CGBlockConfig, CGNet, NetworkConfig
from .ops import ConvSpec
from .tensor import Pcg32

KERNEL_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-5
MIN_STEP = 1e-9
KINK_RTOL = 1e-4
KINK_ATOL = 1e-7

MICRO_NET = NetworkConfig(M=1, N=1, num_classes=3, channels=(8, 8, 16), glo_reduction=4)


@dataclass
class GradEntry:
    check: str
    tensor: str
    kind: str  # "input" or "param"
    error: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.error <= self.tolerance)


@dataclass
class GradReport:
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    def param_entries(self, check=None):
        return [e for e in self.entries if e.kind == "param" and (check is None or e.check == check)]

    def checks(self):
        return list(dict.fromkeys(e.check for e in self.entries))

    def worst(self, check=None):
        errs = [e.error for e in self.entries if check is None or e.check == check]
        return max(errs) if errs else 0.0

    def extend(self, other):
        self.entries.extend(other.entries)
        return self

    def to_text(self):
        lines = []
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            lines.append(f"{e.check:<24} {e.kind:<5} {e.tensor:<40} {e.error:.3e} (tol {e.tolerance:.0e}) {status}")
        lines.append(f"gradcheck {'passed' if self.passed else 'FAILED'}: "
                     f"{sum(e.passed for e in self.entries)}/{len(self.entries)} tensors within tolerance")
        return "\n".join(lines) + "\n"


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    return float((np.abs(a - n) / np.maximum(1.0, np.abs(a) + np.abs(n))).max())


def numeric_grad(f, x, step=STEP, refine=False):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place).

    With ``refine`` an entry whose forward and backward one-sided quotients
    disagree (a kink lies inside the step) is retried with steps shrunk by 10x.
    """
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    base = f() if refine else None
    for i in range(flat.size):
        orig = flat[i]
        h = step * max(1.0, abs(float(orig)))
        while True:
            flat[i] = orig + h
            hi = f()
            flat[i] = orig - h
            lo = f()
            flat[i] = orig
            if not refine or h <= MIN_STEP * max(1.0, abs(float(orig))):
                break
            fwd, bwd = (hi - base) / h, (base - lo) / h
            if abs(fwd - bwd) <= KINK_RTOL * (abs(fwd) + abs(bwd)) + KINK_ATOL:
                break
            h /= 10
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_layer(name, layer, store, x, tolerance=KERNEL_TOL, seed=0):
    """Check input and parameter gradients of a layer run in train mode."""
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal(layer.forward(x, train=True).shape)

    def loss():
        return float(np.sum(layer.forward(x, train=True) * probe))

    store.zero_grad()
    layer.forward(x, train=True)
    gx = layer.backward(probe)
    report = GradReport()
    report.entries.append(GradEntry(name, "x", "input", relative_error(gx, numeric_grad(loss, x)), tolerance))
    for pname, p in store.params.items():
        analytic = p.grad.copy()
        report.entries.append(GradEntry(name, pname, "param",
                                        relative_error(analytic, numeric_grad(loss, p.value)), tolerance))
    return report


def check_function(name, forward, backward, inputs, tolerance=KERNEL_TOL, seed=0):
    """``forward(*inputs) -> out``; ``backward(grad_out, *inputs)`` returns one grad per input."""
    rng = np.random.default_rng(seed)
    values = list(inputs.values())
    probe = rng.standard_normal(forward(*values).shape)
    grads = backward(probe, *values)
    report = GradReport()
    for (label, x), g in zip(inputs.items(), grads):
        num = numeric_grad(lambda: float(np.sum(forward(*values) * probe)), x)
        report.entries.append(GradEntry(name, label, "input", relative_error(g, num), tolerance))
    return report


def _away_from_zero(rng, shape, lo=0.05):
    # keeps kinked activations differentiable under the finite-difference step
    mag = rng.uniform(lo, 1.0, shape)
    return np.where(rng.random(shape) < 0.5, -mag, mag)


def kernel_checks(tolerance=KERNEL_TOL, seed=0):
    rng = np.random.default_rng(seed)
    prng = Pcg32(seed)
    f64 = np.float64
    report = GradReport()

    conv_cases = [
        ("conv3x3_stride2", ConvSpec(3, 4, 3, 3, stride=2, padding=1, has_bias=True), 9),
        ("conv3x3_dil1", ConvSpec(4, 4, 3, 3, padding=1), 7),
        ("conv3x3_dil2", ConvSpec(4, 6, 3, 3, padding=2, dilation=2), 9),
        ("conv3x3_dil4", ConvSpec(2, 3, 3, 3, padding=4, dilation=4), 11),
        ("conv_channelwise_dil2", ConvSpec(4, 4, 3, 3, padding=2, dilation=2, groups=4), 8),
        ("conv1x1_bias", ConvSpec(5, 3, 1, 1, has_bias=True), 6),
    ]
    for name, spec, size in conv_cases:
        store = ParamStore()
        layer = Conv2d(store, name, spec, prng, f64)
        x = rng.standard_normal((2, spec.in_channels, size, size))
        report.extend(check_layer(name, layer, store, x, tolerance, seed))

    store = ParamStore()
    bn = BatchNorm2d(store, "bn", 3, f64)
    bn.gamma.value[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.value[:] = rng.standard_normal(3)
    report.extend(check_layer("batchnorm_train", bn, store, rng.standard_normal((2, 3, 4, 5)) * 2 + 1, tolerance, seed))

    store = ParamStore()
    pr = PReLU(store, "prelu", 3, f64)
    pr.slope.value[:] = rng.uniform(0.05, 0.5, 3)
    report.extend(check_layer("prelu", pr, store, _away_from_zero(rng, (2, 3, 4, 4)), tolerance, seed))

    report.extend(check_layer("relu", ReLU(), ParamStore(), _away_from_zero(rng, (2, 3, 4, 4)), tolerance, seed))

    store = ParamStore()
    report.extend(check_layer("affine", Affine(store, "fc", 6, 4, prng, f64), store,
                              rng.standard_normal((3, 6)), tolerance, seed))

    store = ParamStore()
    report.extend(check_layer("global_context", GlobalContext(store, "glo", 8, 4, prng, f64), store,
                              rng.standard_normal((2, 8, 4, 4)), tolerance, seed))

    report.extend(check_function("sigmoid", ops.sigmoid_forward,
                            lambda g, x: (ops.sigmoid_backward(g, ops.sigmoid_forward(x)),),
                            {"x": rng.standard_normal((3, 5)) * 3}, tolerance, seed))
    report.extend(check_function("global_avg_pool", ops.global_avg_pool_forward,
                            lambda g, x: (ops.global_avg_pool_backward(g, x.shape),),
                            {"x": rng.standard_normal((2, 3, 5, 4))}, tolerance, seed))
    report.extend(check_function("avg_pool3x3s2", ops.avg_pool3x3s2_forward,
                            lambda g, x: (ops.avg_pool3x3s2_backward(g, x.shape),),
                            {"x": rng.standard_normal((2, 3, 7, 8))}, tolerance, seed))
    report.extend(check_function("bilinear_upsample_x8", lambda x: ops.bilinear_upsample_forward(x, 8),
                            lambda g, x: (ops.bilinear_upsample_backward(g, 8, x.shape),),
                            {"x": rng.standard_normal((2, 3, 3, 2))}, tolerance, seed))

    scores = rng.standard_normal((2, 4, 3, 3)) * 2
    labels = rng.integers(0, 4, (2, 3, 3))
    labels[0, 0, :2] = 255
    for reduction in ("mean", "sum"):
        name = f"softmax_ce_{reduction}"
        _, analytic = ops.softmax_ce_masked(scores, labels, 255, reduction)
        num = numeric_grad(lambda: ops.softmax_ce_masked(scores, labels, 255, reduction)[0], scores)
        report.entries.append(GradEntry(name, "scores", "input", relative_error(analytic, num), tolerance))

    for residual in ("grl", "lrl", "none"):
        store = ParamStore()
        cfg = CGBlockConfig(8, 8, dilation=2, residual=residual, glo_reduction=4, interchannel_1x1=residual == "lrl")
        block = CGBlock(store, "block", cfg, prng, f64)
        report.extend(check_layer(f"cg_block_{residual}", block, store,
                                  rng.standard_normal((2, 8, 6, 6)), tolerance, seed))
    store = ParamStore()
    cfg = CGBlockConfig(4, 8, dilation=2, downsample=True, residual="none", glo_reduction=4)
    report.extend(check_layer("cg_block_down", CGBlock(store, "down", cfg, prng, f64), store,
                              rng.standard_normal((2, 4, 8, 8)), tolerance, seed))
    return report


def network_check(cfg=MICRO_NET, size=16, tolerance=MODEL_TOL, seed=0, step=STEP):
    """End-to-end check of a float64 network under the masked cross-entropy loss."""
    rng = np.random.default_rng(seed)
    net = CGNet(cfg, seed=seed, dtype=np.float64)
    x = rng.standard_normal((2, 3, size, size)) * 50
    labels = rng.integers(0, cfg.num_classes, (2, size, size))
    labels[:, :2, :] = 255

    def loss():
        return ops.softmax_ce_masked(net.forward(x, train=True), labels)[0]

    net.store.zero_grad()
    _, g = ops.softmax_ce_masked(net.forward(x, train=True), labels)
    gx = net.backward(g)
    report = GradReport()
    name = "cgnet"
    report.entries.append(GradEntry(name, "x", "input", relative_error(gx, numeric_grad(loss, x, step, refine=True)), tolerance))
    for pname, p in net.store.params.items():
        analytic = p.grad.copy()
        report.entries.append(GradEntry(name, pname, "param",
                                        relative_error(analytic, numeric_grad(loss, p.value, step, refine=True)), tolerance))
    return report


def run_gradcheck(tolerance=KERNEL_TOL, model_tolerance=MODEL_TOL, seed=0):
    return kernel_checks(tolerance, seed).extend(network_check(tolerance=model_tolerance, seed=seed))
