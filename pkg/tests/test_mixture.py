import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from vcgsa.mixture import chisq_mixture_sf, imhof_sf, liu_sf, mc_sf, saddlepoint_sf


def test_equal_eigenvalues_are_scaled_chi2():
    lam = np.full(4, 2.5)
    for q in (0.5, 5.0, 20.0, 60.0):
        assert chisq_mixture_sf(q, lam) == pytest.approx(stats.chi2.sf(q / 2.5, 4), rel=1e-10)


def test_edge_cases():
    assert chisq_mixture_sf(0.0, [1.0, 2.0]) == 1.0
    assert chisq_mixture_sf(3.0, [0.0, 0.0]) == 0.0
    assert chisq_mixture_sf(3.0, []) == 0.0


@given(st.lists(st.floats(0.05, 5.0), min_size=2, max_size=8), st.floats(0.1, 0.9))
@settings(max_examples=20, deadline=None)
def test_imhof_matches_monte_carlo(lam, u):
    lam = np.array(lam)
    rng = np.random.default_rng(0)
    draws = (rng.standard_normal((200_000, lam.size)) ** 2) @ lam
    q = float(np.quantile(draws, u))
    assert abs(chisq_mixture_sf(q, lam) - (draws >= q).mean()) < 0.006


def test_single_eigenvalue():
    assert imhof_sf(3.0, np.array([1.0])) == pytest.approx(stats.chi2.sf(3.0, 1), abs=1e-7)


def test_saddlepoint_in_far_tail():
    lam = np.array([3.0, 1.0, 0.5, 0.2])
    q = 100.0
    ref = imhof_sf(q, lam)
    assert ref < 1e-7
    assert saddlepoint_sf(q, lam) == pytest.approx(ref, rel=0.1)
    far = chisq_mixture_sf(300.0, lam)
    assert 0.0 < far < 1e-20


def test_liu_and_mc_agree_roughly():
    lam = np.array([2.0, 1.0, 1.0, 0.3])
    q = 8.0
    exact = imhof_sf(q, lam)
    assert abs(liu_sf(q, lam) - exact) < 0.01
    assert abs(mc_sf(q, lam, draws=200_000) - exact) < 0.005
    assert chisq_mixture_sf(q, lam, method="liu") == liu_sf(q, lam)


def test_monotone_in_q():
    lam = np.array([1.5, 0.7, 0.1])
    qs = np.linspace(0.1, 30, 60)
    p = [chisq_mixture_sf(q, lam) for q in qs]
    assert np.all(np.diff(p) <= 1e-12)
    assert all(0.0 <= v <= 1.0 for v in p)
