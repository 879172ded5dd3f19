import numpy as np
import pytest

from vcgsa.data_model import CountMatrix, LongitudinalDesign, SampleMeta


def make_design(n=6, n_i=3, q=1, seed=0, uniform_times=True):
    rng = np.random.default_rng(seed)
    sub = [f"i{i:03d}" for i in range(n) for _ in range(n_i)]
    samp = [f"s{i:03d}_{t}" for i in range(n) for t in range(n_i)]
    if uniform_times:
        t = rng.uniform(0, 1, n * n_i)
    else:
        t = np.tile(np.arange(1.0, n_i + 1), n)
    x = np.repeat(rng.normal(size=(n, q)), n_i, axis=0)
    design, order = LongitudinalDesign.from_arrays(samp, sub, t, x)
    return design


def make_counts(design, P=50, seed=0, mean=200.0):
    rng = np.random.default_rng(seed)
    mu = rng.gamma(2.0, mean / 2.0, size=(P, 1)) * rng.uniform(0.8, 1.2, size=(1, design.n_obs))
    counts = rng.poisson(mu)
    return CountMatrix(counts, [f"g{j}" for j in range(P)], design.sample_ids)


@pytest.fixture
def design():
    return make_design()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
