"""Context Guided blocks and the three-stage segmentation network."""

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .layers import (BatchNorm2d, Conv2d, GlobalContext, Layer, ParamStore, bn_act,
                     conv_bn_act)
from .ops import ConvSpec
from .tensor import Pcg32, add, concat_channels, split_channels

RESIDUALS = ("none", "lrl", "grl")
ACTIVATIONS = ("relu", "prelu")
SUR_MODES = ("none", "single", "full")


@dataclass(frozen=True)
class CGBlockConfig:
    in_channels: int
    out_channels: int
    dilation: int = 2
    downsample: bool = False
    residual: str = "grl"
    use_sur: bool = True
    use_glo: bool = True
    interchannel_1x1: bool = False
    glo_reduction: int = 16
    activation: str = "prelu"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 2 or self.out_channels % 2:
            raise ConfigError(f"out_channels must be positive and even: {self}")
        if self.residual not in RESIDUALS:
            raise ConfigError(f"residual must be one of {RESIDUALS}, got {self.residual!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.residual != "none" and (self.downsample or self.in_channels != self.out_channels):
            raise ConfigError("residual blocks need in_channels == out_channels and no downsampling")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.glo_reduction < 1 or self.out_channels % self.glo_reduction:
            raise ConfigError(f"glo_reduction {self.glo_reduction} must divide {self.out_channels}")


class CGBlock(Layer):
    """Local + surrounding features, joint BN/activation, global channel gate.

    Regular blocks reduce to half width with a 1x1 conv and run the two
    channel-wise 3x3 branches at half width. Downsampling blocks enter with a
    full 3x3 stride-2 conv, run the branches at full width and reduce the
    concatenation back with a 1x1 conv.
    """

    def __init__(self, store, name, cfg, rng, dtype=np.float32):
        self.cfg = cfg
        act = cfg.activation
        if cfg.downsample:
            branch = cfg.out_channels
            entry = ConvSpec(cfg.in_channels, branch, 3, 3, stride=2, padding=1)
        else:
            branch = cfg.out_channels // 2
            entry = ConvSpec(cfg.in_channels, branch, 1, 1)
        self.branch = branch
        joint = 2 * branch
        sur_dil = cfg.dilation if cfg.use_sur else 1
        self.entry = conv_bn_act(store, name + ".entry", entry, act, rng, dtype)
        self.loc = Conv2d(store, name + ".loc", ConvSpec(branch, branch, 3, 3, padding=1, groups=branch), rng, dtype)
        self.sur = Conv2d(store, name + ".sur",
                          ConvSpec(branch, branch, 3, 3, padding=sur_dil, dilation=sur_dil, groups=branch),
                          rng, dtype)
        self.joi = bn_act(store, name + ".joi", joint, act, dtype)
        self.mix = Conv2d(store, name + ".mix", ConvSpec(joint, joint, 1, 1), rng, dtype) if cfg.interchannel_1x1 else None
        self.reduce = Conv2d(store, name + ".reduce", ConvSpec(joint, cfg.out_channels, 1, 1), rng, dtype) if cfg.downsample else None
        self.glo = GlobalContext(store, name + ".glo", cfg.out_channels, cfg.glo_reduction, rng, dtype) if cfg.use_glo else None

    def _gate(self, x, train):
        return self.glo.forward(x, train) if self.glo is not None else x

    def joint_feature(self, x, train=False):
        """Everything up to (not including) the gate and the residual path."""
        t = self.entry.forward(x, train)
        j = concat_channels(self.loc.forward(t, train), self.sur.forward(t, train))
        j = self.joi.forward(j, train)
        if self.mix is not None:
            j = self.mix.forward(j, train)
        if self.reduce is not None:
            j = self.reduce.forward(j, train)
        return j

    def forward(self, x, train=False):
        j = self.joint_feature(x, train)
        res = self.cfg.residual
        if res == "grl":
            return add(x, self._gate(j, train))
        if res == "lrl":
            return self._gate(add(x, j), train)
        return self._gate(j, train)

    def backward(self, grad):
        res = self.cfg.residual
        g = self.glo.backward(grad) if self.glo is not None else grad
        gx_res = grad if res == "grl" else g if res == "lrl" else None
        if self.reduce is not None:
            g = self.reduce.backward(g)
        if self.mix is not None:
            g = self.mix.backward(g)
        g = self.joi.backward(g)
        g_loc, g_sur = split_channels(g, self.branch, self.branch)
        gt = self.loc.backward(g_loc) + self.sur.backward(g_sur)
        gx = self.entry.backward(gt)
        if gx_res is not None:
            gx = gx + gx_res
        return gx

    def flops(self, shape):
        n, t = self.entry.flops(shape)
        n += self.loc.flops(t)[0] + self.sur.flops(t)[0]
        j = (t[0], 2 * self.branch, t[2], t[3])
        k, j = self.joi.flops(j)
        n += k
        for layer in (self.mix, self.reduce, self.glo):
            if layer is not None:
                k, j = layer.flops(j)
                n += k
        return n, j


def build_cg_block(cfg, rng, store=None, name="block", dtype=np.float32):
    store = ParamStore() if store is None else store
    return CGBlock(store, name, cfg, rng, dtype), store


@dataclass(frozen=True)
class NetworkConfig:
    M: int = 3
    N: int = 21
    num_classes: int = 19
    channels: tuple = (32, 64, 128)
    dilations: tuple = (2, 4)
    input_injection: bool = True
    sur_mode: str = "full"
    use_glo: bool = True
    residual: str = "grl"
    activation: str = "prelu"
    interchannel_1x1: bool = False
    glo_reduction: int = 16

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.M < 1 or self.N < 1:
            raise ConfigError(f"M and N must be >= 1, got M={self.M}, N={self.N}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.channels) != 3 or any(c < 2 or c % 2 for c in self.channels):
            raise ConfigError(f"channels must be three positive even ints, got {self.channels}")
        if len(self.dilations) != 2 or min(self.dilations) < 1:
            raise ConfigError(f"dilations must be two ints >= 1, got {self.dilations}")
        if self.sur_mode not in SUR_MODES:
            raise ConfigError(f"sur_mode must be one of {SUR_MODES}, got {self.sur_mode!r}")
        if self.residual not in RESIDUALS:
            raise ConfigError(f"residual must be one of {RESIDUALS}, got {self.residual!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    def to_dict(self):
        return asdict(self)


class CGNet(Layer):
    """Stage 1: three Conv-BN-Act at 1/2 resolution. Stages 2 and 3: a
    downsampling CG block followed by M-1 (N-1) regular blocks. Stage inputs
    concatenate the first and last outputs of the previous stage with the
    injected, pooled image. A 1x1 classifier at 1/8 resolution is upsampled
    bilinearly back to the input size."""

    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.store = store = ParamStore()
        rng = Pcg32(seed)
        c1, c2, c3 = cfg.channels
        act = cfg.activation
        inj = 3 if cfg.input_injection else 0
        self.stage1 = [
            conv_bn_act(store, "stage1.0", ConvSpec(3, c1, 3, 3, stride=2, padding=1), act, rng, dtype),
            conv_bn_act(store, "stage1.1", ConvSpec(c1, c1, 3, 3, padding=1), act, rng, dtype),
            conv_bn_act(store, "stage1.2", ConvSpec(c1, c1, 3, 3, padding=1), act, rng, dtype),
        ]
        self.merge2 = bn_act(store, "stage2.in", c1 + inj, act, dtype)
        self.stage2 = self._stage(store, "stage2", c1 + inj, c2, cfg.M, cfg.dilations[0], rng, dtype, last_stage=False)
        self.merge3 = bn_act(store, "stage3.in", 2 * c2 + inj, act, dtype)
        self.stage3 = self._stage(store, "stage3", 2 * c2 + inj, c3, cfg.N, cfg.dilations[1], rng, dtype, last_stage=True)
        self.merge_head = bn_act(store, "head.in", 2 * c3, act, dtype)
        self.classifier = Conv2d(store, "head.classifier", ConvSpec(2 * c3, cfg.num_classes, 1, 1, has_bias=True), rng, dtype)
        self.stage_shapes = {}
        self._cache = None

    def _stage(self, store, name, c_in, c_out, count, dilation, rng, dtype, last_stage):
        cfg = self.cfg
        blocks = []
        for i in range(count):
            if cfg.sur_mode == "full":
                use_sur = True
            elif cfg.sur_mode == "single":
                use_sur = last_stage and i == count - 1
            else:
                use_sur = False
            down = i == 0
            bcfg = CGBlockConfig(
                c_in if down else c_out, c_out, dilation=dilation, downsample=down,
                residual="none" if down else cfg.residual, use_sur=use_sur, use_glo=cfg.use_glo,
                interchannel_1x1=cfg.interchannel_1x1, glo_reduction=cfg.glo_reduction,
                activation=cfg.activation)
            blocks.append(CGBlock(store, f"{name}.{i}", bcfg, rng, dtype))
        return blocks

    @property
    def blocks(self):
        return self.stage2 + self.stage3

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected input [N,3,H,W], got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ShapeError(f"input height and width must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")

    def forward(self, x, train=False):
        self._check_input(x)
        x = np.ascontiguousarray(x, dtype=self.dtype)
        inj = self.cfg.input_injection
        p1 = ops.avg_pool3x3s2_forward(x) if inj else None
        p2 = ops.avg_pool3x3s2_forward(p1) if inj else None

        h = x
        for layer in self.stage1:
            h = layer.forward(h, train)
        shapes = {"stage1": h.shape}
        if inj:
            h = concat_channels(h, p1)
        h = self.merge2.forward(h, train)
        first2, h = self._run(self.stage2, h, train)
        shapes["stage2"] = h.shape
        h = concat_channels(first2, h)
        if inj:
            h = concat_channels(h, p2)
        h = self.merge3.forward(h, train)
        first3, h = self._run(self.stage3, h, train)
        shapes["stage3"] = h.shape
        h = self.merge_head.forward(concat_channels(first3, h), train)
        logits = self.classifier.forward(h, train)
        shapes["logits"] = logits.shape
        self.stage_shapes = shapes
        self._cache = x.shape if train else None
        return ops.bilinear_upsample_forward(logits, 8)

    @staticmethod
    def _run(blocks, h, train):
        h = blocks[0].forward(h, train)
        first = h
        for block in blocks[1:]:
            h = block.forward(h, train)
        return first, h

    @staticmethod
    def _run_backward(blocks, g_first, g_last):
        g = g_last
        for block in reversed(blocks[1:]):
            g = block.backward(g)
        return blocks[0].backward(g + g_first)

    def backward(self, grad):
        """Accumulates parameter gradients; returns the gradient w.r.t. the input."""
        x_shape = self._saved()
        cfg = self.cfg
        c1, c2, c3 = cfg.channels
        g = ops.bilinear_upsample_backward(grad, 8, self.stage_shapes["logits"])
        g = self.merge_head.backward(self.classifier.backward(g))
        g_first3, g_last3 = split_channels(g, c3, c3)
        g = self.merge3.backward(self._run_backward(self.stage3, g_first3, g_last3))
        if cfg.input_injection:
            g_first2, g_last2, g_p2 = split_channels(g, c2, c2, 3)
        else:
            g_first2, g_last2 = split_channels(g, c2, c2)
        g = self.merge2.backward(self._run_backward(self.stage2, g_first2, g_last2))
        if cfg.input_injection:
            g, g_p1 = split_channels(g, c1, 3)
            p1_shape = (x_shape[0], 3, (x_shape[2] + 1) // 2, (x_shape[3] + 1) // 2)
            g_p1 = g_p1 + ops.avg_pool3x3s2_backward(g_p2, p1_shape)
        for layer in reversed(self.stage1):
            g = layer.backward(g)
        if cfg.input_injection:
            g = g + ops.avg_pool3x3s2_backward(g_p1, x_shape)
        self._cache = None
        return g

    def flops(self, shape):
        n_img, _, h, w = shape
        cfg = self.cfg
        total = 0
        if cfg.input_injection:
            total += 2 * 3 * ((h + 1) // 2) * ((w + 1) // 2)
            total += 2 * 3 * ((h + 3) // 4) * ((w + 3) // 4)
        s = shape
        for layer in self.stage1:
            k, s = layer.flops(s)
            total += k
        inj = 3 if cfg.input_injection else 0
        k, s = self.merge2.flops((n_img, s[1] + inj, s[2], s[3]))
        total += k
        k, s = self._stage_flops(self.stage2, s)
        total += k
        k, s = self.merge3.flops((n_img, 2 * s[1] + inj, s[2], s[3]))
        total += k
        k, s = self._stage_flops(self.stage3, s)
        total += k
        k, s = self.merge_head.flops((n_img, 2 * s[1], s[2], s[3]))
        total += k
        k, s = self.classifier.flops(s)
        return total + k, s

    @staticmethod
    def _stage_flops(blocks, s):
        total = 0
        for block in blocks:
            k, s = block.flops(s)
            total += k
        return total, s

    def num_params(self):
        return self.store.num_params()


def build_network(cfg, seed=0, dtype=np.float32):
    return CGNet(cfg, seed, dtype)


def count_params(model):
    """Learnable scalars; BN running statistics are excluded."""
    return model.store.num_params()


def estimate_flops(model, input_dims):
    """Forward-pass operation count for one image of ``input_dims`` = (3, H, W).

    Convolutions count 2 ops per multiply-accumulate (plus one per bias add),
    affines 2*C_in*C_out, and BN, activations and pooling 2 ops per output
    element.
    """
    c, h, w = input_dims
    if c != 3 or h % 8 or w % 8:
        raise ShapeError(f"input dims must be (3, H, W) with H, W divisible by 8, got {input_dims}")
    return model.flops((1, c, h, w))[0]


