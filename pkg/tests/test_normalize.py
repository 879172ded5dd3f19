import numpy as np
import pytest
from statsmodels.nonparametric.smoothers_lowess import lowess

from vcgsa.data_model import CountMatrix, NumericalError, ValidationError
from vcgsa.normalize import log_cpm, voom_weights, voom_weights_from_y

from conftest import make_counts, make_design


def test_log_cpm_hand_values():
    counts = np.array([[0, 10], [9, 0]])
    out = log_cpm(counts)
    # column sums 9 and 10
    expected = np.log2(1e6 * np.array([[0.5 / 10, 10.5 / 11], [9.5 / 10, 0.5 / 11]]))
    np.testing.assert_allclose(out.y, expected, rtol=1e-14)
    np.testing.assert_array_equal(out.library_sizes, [9, 10])


def test_log_cpm_accepts_count_matrix():
    cm = CountMatrix(np.array([[1, 2], [3, 4]]), ["a", "b"], ["s", "t"])
    np.testing.assert_array_equal(log_cpm(cm).y, log_cpm(cm.counts).y)


def test_log_cpm_scale_invariance():
    rng = np.random.default_rng(1)
    counts = rng.poisson(50, size=(30, 4))
    # doubling a library shifts log-cpm by about zero for large counts
    doubled = counts.copy()
    doubled[:, 0] *= 2
    diff = log_cpm(doubled).y[:, 0] - log_cpm(counts).y[:, 0]
    assert np.max(np.abs(diff)) < 0.05


def test_voom_weights_shape_and_positivity():
    design = make_design(n=8, n_i=3)
    counts = make_counts(design, P=200)
    w = voom_weights(counts, design)
    assert w.shape == (200, design.n_obs)
    assert np.all(np.isfinite(w)) and np.all(w > 0)


def test_voom_matches_manual_construction():
    design = make_design(n=8, n_i=3, seed=3)
    counts = make_counts(design, P=120, seed=3)
    X = design.null_matrix()
    w = voom_weights(counts, design)
    # oracle: per-gene lstsq, lowess on sqrt(sqrt(RSS)), evaluation at fitted counts
    y = log_cpm(counts).y
    lib = counts.counts.sum(axis=0)
    fitted = np.empty_like(y)
    s = np.empty(y.shape[0])
    for j in range(y.shape[0]):
        b = np.linalg.solve(X.T @ X, X.T @ y[j])
        fitted[j] = X @ b
        s[j] = np.sqrt(np.sum((y[j] - fitted[j]) ** 2))
    log_lib = np.log2(1 + lib)
    r_tilde = y.mean(axis=1) + log_lib.mean() - np.log2(1e6)
    fit = lowess(np.sqrt(s), r_tilde, frac=0.5, it=3)
    trend = np.interp(fitted + log_lib - np.log2(1e6), fit[:, 0], fit[:, 1])
    np.testing.assert_allclose(w, trend**-4, rtol=1e-10)


def test_voom_constant_scale_gives_constant_weights():
    design = make_design(n=5, n_i=2)
    rng = np.random.default_rng(0)
    base = rng.normal(size=(1, design.n_obs))
    base -= design.null_matrix() @ np.linalg.lstsq(design.null_matrix(), base[0], rcond=None)[0]
    y = rng.normal(5, 1, size=(20, 1)) + base
    w = voom_weights_from_y(y, design.null_matrix())
    np.testing.assert_allclose(w, w[0, 0])


def test_voom_needs_spread_of_means():
    design = make_design(n=5, n_i=2)
    rng = np.random.default_rng(0)
    y = np.full((2, design.n_obs), 3.0) + rng.normal(size=(2, design.n_obs))
    with pytest.raises(NumericalError, match="insufficient genes"):
        voom_weights_from_y(y, np.ones((design.n_obs, 1)))


def test_voom_rejects_misordered_columns():
    design = make_design(n=3, n_i=2)
    counts = make_counts(design, P=10)
    flipped = counts.select_samples(design.sample_ids[::-1])
    with pytest.raises(ValidationError):
        voom_weights(flipped, design)
