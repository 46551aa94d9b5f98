"""Compare the numba and numpy convolution back ends.

    python benchmarks/bench_kernels.py [--repeat 20] [--threads N]

Shapes follow the desk configuration (batch 4, 64x64 input) and one
full-scale stage-3 layer. Also times a complete forward/backward/Adam step
of the desk network under each back end.
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from cgnet import _jit, kernels

CASES = [
    # name, x shape, w shape, stride, padding, dilation, groups
    ("stem 3x3 s2", (4, 3, 64, 64), (16, 3, 3, 3), 2, 1, 1, 1),
    ("dense 3x3", (4, 16, 32, 32), (16, 16, 3, 3), 1, 1, 1, 1),
    ("channel-wise d2", (4, 32, 16, 16), (32, 1, 3, 3), 1, 2, 2, 32),
    ("channel-wise d4", (4, 64, 8, 8), (64, 1, 3, 3), 1, 4, 4, 64),
    ("1x1 reduce", (4, 128, 8, 8), (64, 128, 1, 1), 1, 0, 1, 1),
    ("full-res stage3 cw", (1, 64, 85, 85), (64, 1, 3, 3), 1, 4, 4, 64),
]

STEP_SCRIPT = """
import time, numpy as np
from cgnet.model import CGNet, NetworkConfig
from cgnet.ops import softmax_ce_masked
from cgnet.training import TrainConfig, AdamState, adam_step
net = CGNet(NetworkConfig(M=3, N=3, num_classes=4, channels=(16, 32, 64)))
cfg = TrainConfig(max_iter=10, batch_size=4, crop_size=64)
rng = np.random.default_rng(0)
x = rng.standard_normal((4, 3, 64, 64)).astype(np.float32)
y = rng.integers(0, 4, (4, 64, 64))
state = AdamState()
times = []
for i in range({n}):
    t = time.perf_counter()
    s = net.forward(x, train=True)
    _, g = softmax_ce_masked(s, y)
    net.backward(g)
    adam_step(net.store, state, 1e-3, cfg)
    times.append(time.perf_counter() - t)
print(sorted(times[1:])[len(times[1:]) // 2])
"""


def _time(fn, repeat):
    fn()  # warm-up / compile
    samples = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t)
    return statistics.median(samples)


def bench_conv(repeat):
    rng = np.random.default_rng(0)
    print(f"{'case':<20} {'pass':<8} {'numba ms':>9} {'numpy ms':>9} {'speedup':>8}")
    for name, xs, ws, s, p, d, g in CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        out = kernels.conv2d(x, w, None, s, p, d, g, backend="numpy")
        go = rng.standard_normal(out.shape).astype(np.float32)
        passes = {
            "fwd": lambda be: kernels.conv2d(x, w, None, s, p, d, g, backend=be),
            "grad_w": lambda be: kernels.conv2d_grad_weight(go, x, w.shape, s, p, d, g, backend=be),
            "grad_x": lambda be: kernels.conv2d_grad_input(go, w, x.shape, s, p, d, g, backend=be),
        }
        for pname, fn in passes.items():
            t_nb = _time(lambda: fn("numba"), repeat)
            t_np = _time(lambda: fn("numpy"), repeat)
            print(f"{name:<20} {pname:<8} {t_nb * 1e3:9.3f} {t_np * 1e3:9.3f} {t_np / t_nb:8.1f}x")


def bench_step(n):
    results = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, CGNET_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(n=n)], env=env,
                             capture_output=True, text=True, check=True)
        results[label] = float(out.stdout.strip())
    print(f"\ndesk training step (M3N3, 16/32/64, batch 4, 64x64): "
          f"numba {results['numba'] * 1e3:.1f} ms, numpy {results['numpy'] * 1e3:.1f} ms "
          f"({results['numpy'] / results['numba']:.1f}x)")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=6, help="training steps timed per back end")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    if not _jit.JIT_ENABLED:
        sys.exit("numba back end disabled by CGNET_DISABLE_JIT; unset it to benchmark")
    if args.threads:
        _jit.configure_threads(args.threads)
    bench_conv(args.repeat)
    bench_step(args.steps)


if __name__ == "__main__":
    main()
