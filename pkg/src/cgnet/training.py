"""Optimisation loop: poly learning rate, Adam, augmentation, masked CE.

Randomness is drawn from PCG32 substreams keyed by (iteration, slot), so a
run is a pure function of seed, config and data, and a run resumed from a
checkpoint replays the uninterrupted run exactly.
"""

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .errors import ConfigError, NonFiniteError
from .ops import resize_bilinear, softmax_ce_masked
from .tensor import Pcg32

log = logging.getLogger(__name__)

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.5, 1.75, 2.0)


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    power: float = 0.9
    max_iter: int = 60000
    batch_size: int = 14
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0005
    adam_eps: float = 1e-8
    seed: int = 0
    crop_size: int = 680
    scales: tuple = DEFAULT_SCALES
    means: tuple = None
    ignore_index: int = 255
    loss_reduction: str = "mean"
    mirror_prob: float = 0.5
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.scales = tuple(float(s) for s in self.scales)
        if self.means is not None:
            self.means = tuple(float(m) for m in self.means)
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.power < 0:
            raise ConfigError(f"power must be >= 0, got {self.power}")
        if self.max_iter < 1 or self.batch_size < 1:
            raise ConfigError("max_iter and batch_size must be >= 1")
        if not self.scales or min(self.scales) <= 0:
            raise ConfigError(f"scale set must be non-empty and positive, got {self.scales}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"loss_reduction must be 'mean' or 'sum', got {self.loss_reduction!r}")
        if self.crop_size < 8 or self.crop_size % 8:
            raise ConfigError(f"crop_size must be a positive multiple of 8, got {self.crop_size}")


def poly_lr(iteration, cfg):
    if not 0 <= iteration <= cfg.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter) ** cfg.power


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def slots(self, name, like):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
        return self.m[name], self.v[name]


def adam_step(store, state, lr, cfg):
    """One Adam update with L2 weight decay folded into the gradient.

    Parameters flagged ``decay=False`` (BN affine, PReLU slopes) are exempt.
    Gradients are zeroed afterwards.
    """
    for name, p in store.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in store.params.items():
        g = p.grad
        if p.decay and cfg.weight_decay:
            g = g + p.value.dtype.type(cfg.weight_decay) * p.value
        m, v = state.slots(name, p.value)
        dt = p.value.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        p.value -= dt(lr) * mhat / (np.sqrt(vhat) + dt(cfg.adam_eps))
        p.grad[...] = 0


def _resize_labels(labels, out_h, out_w):
    h, w = labels.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return labels[rows[:, None], cols[None, :]]


def augment(image, labels, rng, cfg):
    """Random scale, mirror, mean subtraction, pad and crop.

    ``image`` is [3,H,W] in 0..255, ``labels`` is [H,W]. Always consumes four
    draws from ``rng``. Returns float32 [3,crop,crop] and int32 [crop,crop].
    """
    crop = cfg.crop_size
    scale = cfg.scales[rng.randint(0, len(cfg.scales))]
    flip = rng.uniform() < cfg.mirror_prob
    u_row, u_col = rng.uniform(), rng.uniform()

    _, h, w = image.shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    img = np.asarray(image, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int32)
    if (nh, nw) != (h, w):
        img = resize_bilinear(img, nh, nw)
        lab = _resize_labels(lab, nh, nw)
    if flip:
        img = img[:, :, ::-1]
        lab = lab[:, ::-1]
    means = cfg.means if cfg.means is not None else (0.0, 0.0, 0.0)
    img = img - np.asarray(means, dtype=np.float64)[:, None, None]

    ph, pw = max(nh, crop), max(nw, crop)
    if (ph, pw) != (nh, nw):
        padded = np.zeros((3, ph, pw))
        padded[:, :nh, :nw] = img
        plab = np.full((ph, pw), cfg.ignore_index, dtype=np.int32)
        plab[:nh, :nw] = lab
        img, lab = padded, plab
    assert ph >= crop and pw >= crop
    y0 = min(int(u_row * (ph - crop + 1)), ph - crop)
    x0 = min(int(u_col * (pw - crop + 1)), pw - crop)
    img = img[:, y0:y0 + crop, x0:x0 + crop]
    lab = lab[y0:y0 + crop, x0:x0 + crop]
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lab)


def _stream(iteration, attempt, slot):
    return (iteration << 20) | (attempt << 16) | slot


def sample_batch(samples, iteration, cfg, attempt=0):
    """Draw a with-replacement batch and augment it; deterministic in its arguments."""
    picker = Pcg32(cfg.seed, _stream(iteration, attempt, 0))
    idx = [picker.randint(0, len(samples)) for _ in range(cfg.batch_size)]
    images, labels = [], []
    for slot, k in enumerate(idx, start=1):
        img, lab = augment(samples[k].image, samples[k].labels,
                           Pcg32(cfg.seed, _stream(iteration, attempt, slot)), cfg)
        images.append(img)
        labels.append(lab)
    return np.stack(images), np.stack(labels)


@dataclass
class TrainState:
    iteration: int = 0
    adam: AdamState = field(default_factory=AdamState)

    def to_tensors(self):
        out = {ckpt.STATE_PREFIX + "iteration": np.array([self.iteration], dtype=np.float64),
               ckpt.STATE_PREFIX + "adam_t": np.array([self.adam.t], dtype=np.float64)}
        for name, m in self.adam.m.items():
            out[ckpt.ADAM_M_PREFIX + name] = m
            out[ckpt.ADAM_V_PREFIX + name] = self.adam.v[name]
        return out

    @classmethod
    def from_tensors(cls, tensors):
        it_key = ckpt.STATE_PREFIX + "iteration"
        if it_key not in tensors:
            return cls()
        adam = AdamState(t=int(tensors[ckpt.STATE_PREFIX + "adam_t"][0]))
        for key, val in tensors.items():
            if key.startswith(ckpt.ADAM_M_PREFIX):
                name = key[len(ckpt.ADAM_M_PREFIX):]
                adam.m[name] = val.copy()
                adam.v[name] = tensors[ckpt.ADAM_V_PREFIX + name].copy()
        return cls(int(tensors[it_key][0]), adam)


def format_record(iteration, lr, loss):
    return f"{iteration}\t{lr:.9g}\t{loss:.9g}"


def train_loop(model, samples, cfg, state=None, log_file=None, checkpoint_dir=None, extra_state=None):
    """Run iterations ``state.iteration .. cfg.max_iter - 1``.

    Returns the list of ``(iteration, lr, loss)`` records. ``log_file`` is an
    open text file receiving one formatted record per line. ``extra_state``
    tensors are added to every interval checkpoint.
    """
    if not samples:
        raise ValueError("dataset is empty")
    state = TrainState() if state is None else state
    records = []
    report_every = max(1, cfg.max_iter // 20)
    for it in range(state.iteration, cfg.max_iter):
        x, y = sample_batch(samples, it, cfg)
        if np.all(y == cfg.ignore_index):
            log.warning("iteration %d: batch fully ignored, resampling", it)
            x, y = sample_batch(samples, it, cfg, attempt=1)
            if np.all(y == cfg.ignore_index):
                raise ValueError(f"iteration {it}: every pixel of the batch is ignored")
        scores = model.forward(x, train=True)
        loss, grad = softmax_ce_masked(scores, y, cfg.ignore_index, cfg.loss_reduction)
        if not math.isfinite(loss):
            raise NonFiniteError(f"iteration {it}: loss is {loss}")
        model.store.zero_grad()
        model.backward(grad)
        lr = poly_lr(it, cfg)
        adam_step(model.store, state.adam, lr, cfg)
        state.iteration = it + 1
        records.append((it, lr, loss))
        if log_file is not None:
            log_file.write(format_record(it, lr, loss) + "\n")
            log_file.flush()
        if state.iteration % report_every == 0 or state.iteration == cfg.max_iter:
            log.info("iteration %d/%d lr %.3g loss %.4f", state.iteration, cfg.max_iter, lr, loss)
        if checkpoint_dir and cfg.checkpoint_interval and state.iteration % cfg.checkpoint_interval == 0:
            path = os.path.join(checkpoint_dir, f"iter_{state.iteration:06d}.ckpt")
            tensors = state.to_tensors()
            tensors.update(extra_state or {})
            ckpt.save_checkpoint(path, model, tensors)
    return records
