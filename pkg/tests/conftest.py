import sys

import numpy as np
import pytest
from scipy import signal

from blurret import dataset_gen
from blurret.blur_synth import Sprite
from blurret.dataset_gen import DataConfig

TINY = DataConfig(
    n_categories=2,
    objects_per_category=3,
    trajectories_per_object=3,
    images_per_trajectory=4,
    balance_ratio=None,
)


def random_sprite(rng, size=None, shape="disk"):
    size = size or int(rng.integers(5, 14))
    rgb = rng.uniform(0.05, 1.0, (size, size, 3))
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2
    if shape == "disk":
        mask = (yy**2 + xx**2 <= (size / 2) ** 2).astype(np.float64)
    else:
        mask = (rng.uniform(size=(size, size)) < 0.8).astype(np.float64)
        mask[size // 2, size // 2] = 1.0
    return Sprite(rgb, mask)


def dense_alpha(psf_weights, mask, origin):
    """Alpha by full 2-D convolution of the kernel with the mask, then a crop."""
    h, w = psf_weights.shape
    full = signal.convolve2d(psf_weights, mask)
    out = np.zeros((h, w))
    r0, c0 = origin
    # full[y, x] is the sum over kernel cells q with y - q_r in the mask rows
    for y in range(h):
        for x in range(w):
            fy, fx = y - r0, x - c0
            if 0 <= fy < full.shape[0] and 0 <= fx < full.shape[1]:
                out[y, x] = full[fy, fx]
    return out


def set_erosion(support, radius):
    """Cells whose Chebyshev ball of ``radius`` lies in the support and the frame."""
    h, w = support.shape
    on = {(r, c) for r, c in zip(*np.nonzero(support))}
    out = np.zeros_like(support, dtype=bool)
    for r, c in on:
        if r - radius < 0 or c - radius < 0 or r + radius >= h or c + radius >= w:
            continue
        out[r, c] = all(
            (r + dr, c + dc) in on
            for dr in range(-radius, radius + 1)
            for dc in range(-radius, radius + 1)
        )
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return dataset_gen.build_dataset(TINY, seed=11, out_dir=out)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
