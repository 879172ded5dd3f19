import numpy as np
import pytest

from vcgsa import simulate as S
from vcgsa.data_model import ValidationError


def small(regime, **kw):
    base = dict(n=12, n_i=3, P=60, p=5, replicates=3, grid=(0.0, 1.0))
    base.update(kw)
    return S.SimConfig(regime=regime, **base)


@pytest.mark.parametrize("regime", ["misspecified", "negbin", "poisson_gamma"])
def test_generators_reproducible(regime):
    cfg = small(regime)
    a = S.generate(cfg, S.replicate_rng(3, 1), 0.5)
    b = S.generate(cfg, S.replicate_rng(3, 1), 0.5)
    if a.counts is not None:
        np.testing.assert_array_equal(a.counts.counts, b.counts.counts)
        assert np.all(a.counts.counts >= 0)
    else:
        np.testing.assert_array_equal(a.y, b.y)
    assert a.design == b.design
    assert a.design.n == 12 and a.design.n_obs == 36


def test_counts_variant_shares_pre_rounding_values():
    cfg = small("misspecified")
    cont = S.gen_misspecified(cfg, S.replicate_rng(1, 0), 1.0)
    cnt = S.gen_misspecified_counts(cfg, S.replicate_rng(1, 0), 1.0)
    np.testing.assert_array_equal(cnt.extra["pre_rounding"], cont.y)
    c = cnt.counts.counts
    assert np.all(c >= 1)
    np.testing.assert_array_equal(c, np.maximum(np.ceil(cont.y), 1))


def test_misspecified_values_finite():
    cfg = S.default_config("misspecified", replicates=1)
    d = S.gen_misspecified(cfg, S.replicate_rng(0, 0), 2.0)
    assert d.y.shape == (1000, 600) and np.all(np.isfinite(d.y))


def test_nb_moments():
    rng = np.random.default_rng(0)
    draws = S.nb_counts(rng, np.full(100_000, 50.0))
    assert abs(draws.mean() - 50) < 1
    assert abs(draws.var() / (50 + 50**2) - 1) < 0.05
    assert np.all(S.nb_counts(rng, np.zeros(100)) == 0)


def test_poisson_gamma_mean():
    rng = np.random.default_rng(1)
    mu = np.full(100_000, 40.0)
    kappa = rng.chisquare(S.BCV_DF, mu.size)
    a = S._poisson_gamma(rng, mu, kappa)
    assert abs(a.mean() / 40 - 1) < 0.02


def test_poisson_gamma_set_correlation():
    cfg = small("poisson_gamma", n=6, p=10)
    mu = S._subject_gene_means(cfg, np.random.default_rng(2))
    corr = np.corrcoef(mu[:, :10].T)
    assert corr.min() > 0.8


def test_poisson_gamma_negative_mean_error():
    cfg = small("poisson_gamma", baseline_mu=(1.0,))
    with pytest.raises(ValidationError, match="non-positive"):
        S.gen_poisson_gamma(cfg, S.replicate_rng(0, 0), -5.0)


def test_default_baseline_range():
    b = S.default_baseline(np.random.default_rng(0), 5000)
    assert b.min() >= 1 and b.max() <= 1e5
    assert abs(np.median(np.log2(b)) - 4) < 0.3


def test_config_validation():
    with pytest.raises(ValidationError):
        S.SimConfig(replicates=0)
    with pytest.raises(ValidationError):
        S.SimConfig(alpha=1.0)
    with pytest.raises(ValidationError):
        S.SimConfig(regime="other")
    with pytest.raises(ValidationError):
        S.SimConfig(P=5, p=10)


def test_paper_grid():
    assert S.default_config("misspecified").grid == (0.0, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0)


def test_run_study_table_and_determinism():
    cfg = small("negbin", replicates=4, weights=("gene", "identity"))
    rows = S.run_study(cfg)
    assert len(rows) == 4
    for r in rows:
        assert 0 <= r.rate <= 1
        assert r.se == pytest.approx(np.sqrt(r.rate * (1 - r.rate) / r.replicates))
    csv1 = S.study_csv(rows)
    assert csv1 == S.study_csv(S.run_study(cfg, workers=3))
    assert csv1.splitlines()[0] == ",".join(S.STUDY_COLUMNS)
