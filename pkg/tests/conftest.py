"""Shared helpers: finite-difference gradient checking and tiny datasets."""

import numpy as np
import pytest

from noisebench import FeatureConfig, gen_synthetic_dataset


def finite_difference(f, x, step=1e-5):
    """Central finite differences of the scalar function f with respect to
    the array x, evaluated by mutating x in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        hi = f()
        flat_x[i] = orig - step
        lo = f()
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def random_simplex(rng, n, k):
    """n random points on the k-simplex (flat Dirichlet)."""
    return rng.dirichlet(np.ones(k), size=n)


@pytest.fixture(scope="session")
def toy_feature_config():
    return FeatureConfig(sample_rate=4000, fft_size=256, hop=128, n_mels=24)


@pytest.fixture(scope="session")
def toy_dataset():
    """Small 3-class synthetic dataset shared by read-only tests."""
    return gen_synthetic_dataset(
        n_classes=3, clips_per_class=12, clean_fraction=0.25, sample_rate=4000, seed=11
    )
