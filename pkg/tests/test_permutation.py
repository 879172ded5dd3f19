import warnings

import numpy as np
import pytest

from vcgsa.data_model import LongitudinalDesign, TimeBasis, ValidationError
from vcgsa.permutation import (
    check_permutation_count,
    permutation_indices,
    permutation_pvalue,
    permutation_statistics,
    permute_within_subjects,
)
from vcgsa.vcscore import fit_null, score_from_null, statistic

from conftest import make_design


def test_permutations_stay_within_subjects():
    design = make_design(n=7, n_i=4)
    for b in range(20):
        idx = permutation_indices(design, 42, b)
        assert sorted(idx) == list(range(design.n_obs))
        np.testing.assert_array_equal(design.subject_index[idx], design.subject_index)


def test_single_observation_subject_is_fixed():
    design, _ = LongitudinalDesign.from_arrays(["a", "b", "c"], ["i", "j", "j"], [0.0, 0.0, 1.0])
    for b in range(50):
        assert permutation_indices(design, 1, b)[0] == 0


def test_two_timepoint_swap_frequency():
    design, _ = LongitudinalDesign.from_arrays(["a", "b"], ["i", "i"], [0.0, 1.0])
    swaps = np.mean([permutation_indices(design, s, 0)[0] == 1 for s in range(10_000)])
    assert abs(swaps - 0.5) < 0.02


def test_reproducible_and_order_free():
    design = make_design(n=5, n_i=3)
    a = [permutation_indices(design, 9, b) for b in range(10)]
    b = [permutation_indices(design, 9, k) for k in reversed(range(10))][::-1]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    phi = permute_within_subjects(design, TimeBasis(), 9, 3)
    np.testing.assert_array_equal(phi, design.basis_matrix(TimeBasis())[a[3]])


def test_permutation_path_matches_observed_path():
    design = make_design(n=6, n_i=3)
    rng = np.random.default_rng(0)
    y = rng.normal(size=(3, design.n_obs))
    null = fit_null(y, design)
    phi = design.basis_matrix(TimeBasis())
    stats_ = permutation_statistics(null, phi, design, 5, seed=11)
    for b in range(5):
        idx = permutation_indices(design, 11, b)
        ref = statistic(score_from_null(null, phi[idx], design))
        assert stats_[b] == ref
    np.testing.assert_array_equal(permutation_statistics(null, phi, design, 2, 11, start=3), stats_[3:])


def test_pvalue_formula():
    assert permutation_pvalue(10.0, np.array([1.0, 2.0, 3.0])) == 0.0
    assert permutation_pvalue(2.0, np.array([1.0, 2.0, 3.0])) == pytest.approx(2 / 3)
    assert permutation_pvalue(10.0, np.array([1.0, 2.0, 3.0]), add_one=True) == pytest.approx(0.25)
    with pytest.raises(ValidationError):
        permutation_pvalue(1.0, np.array([]))


def test_permutation_count_checks():
    with pytest.raises(ValidationError):
        check_permutation_count(0)
    with pytest.warns(UserWarning):
        check_permutation_count(50)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        check_permutation_count(1000)
