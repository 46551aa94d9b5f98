import os
import subprocess
import sys
import time

import numpy as np
import pytest

from cgnet.dataio import compute_means, gen_synthetic, read_manifest
from cgnet.model import CGNet, NetworkConfig
from cgnet.training import TrainConfig, train_loop

DESK_NET = dict(M=3, N=3, num_classes=4, channels=(16, 32, 64))


def run_python(code, env_extra=None, timeout=900):
    """Run ``code`` in a fresh interpreter (so env flags read at import take effect)."""
    env = dict(os.environ)
    env.update(env_extra or {})
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, timeout=timeout)
    if out.returncode != 0:
        raise AssertionError(f"subprocess failed:\n{out.stderr}")
    return out.stdout


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    manifest = read_manifest(gen_synthetic(str(root), 3, 6, 32, 4))
    return manifest


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """The desk overfit experiment: trained once, shared by several tests."""
    root = tmp_path_factory.mktemp("overfit")
    manifest = read_manifest(gen_synthetic(str(root), 7, 10, 64, 4))
    samples = manifest.load()
    means = tuple(float(m) for m in compute_means(manifest))
    model = CGNet(NetworkConfig(**DESK_NET), seed=7)
    cfg = TrainConfig(max_iter=500, batch_size=4, crop_size=64, scales=(1.0,), means=means, seed=7)
    start = time.perf_counter()
    records = train_loop(model, samples, cfg)
    return dict(root=root, manifest=manifest, samples=samples, means=means, model=model, cfg=cfg,
                records=records, seconds=time.perf_counter() - start)


def rng(seed=0):
    return np.random.default_rng(seed)


# acceptance outcomes, filled by tests/test_acceptance.py and echoed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
