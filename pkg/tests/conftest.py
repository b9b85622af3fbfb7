import numpy as np
import pytest

from draco_dehaze.blocks import STAGE_TAILS, ArchConfig, init_weights
from draco_dehaze.haze import HazeRecipe, apply_asm, render_scene, sample_airlight


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_config():
    return ArchConfig()


def naive_conv2d(x, w, b, dilation):
    """Quintuple loop reference convolution with same-zero padding."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad = dilation * (k - 1) // 2
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for y in range(h):
                for xx in range(wd):
                    acc = float(b[oi])
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                yy = y + i * dilation - pad
                                xj = xx + j * dilation - pad
                                if 0 <= yy < h and 0 <= xj < wd:
                                    acc += w[oi, ci, i, j] * x[ni, ci, yy, xj]
                    out[ni, oi, y, xx] = acc
    return out


def random_weights(config, seed, tail_scale=0.05, bias_scale=0.0):
    """Initialized weights whose stage tails are small but nonzero.

    ``bias_scale`` > 0 also jitters every bias so no ReLU input sits exactly
    on the kink (zero biases make that common where a patch is all zero).
    """
    w = init_weights(config, seed)
    r = np.random.default_rng(seed + 1000)
    for name in STAGE_TAILS:
        if name in w:
            w[name].data[:] = r.uniform(-tail_scale, tail_scale, w[name].shape)
    if bias_scale:
        for name in w.names():
            if name.endswith(".b"):
                w[name].data[:] = r.uniform(-bias_scale, bias_scale, w[name].shape)
    return w


def toy_pairs(n, size, seed=0, beta=1.0, depth="linear_x"):
    r = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        clear = render_scene(size, size, r)
        hazy, *_ = apply_asm(clear, HazeRecipe(sample_airlight(r), beta, depth))
        pairs.append((hazy.astype(np.float32), clear.astype(np.float32)))
    return pairs
