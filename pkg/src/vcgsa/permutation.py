"""Within-subject permutation of time labels.

Permutation ``b`` draws from a counter-based Philox stream keyed by
``(seed, b)``; subject ``i`` consumes the keys of its own block, so every
permutation is reproducible on its own, in any order, on any worker.
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.typing import NDArray

from .data_model import LongitudinalDesign, ValidationError
from .vcscore import Mode, NullFit, score_from_null, statistic


def _stream(seed: int, b: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), b])))


def permutation_indices(design: LongitudinalDesign, seed: int, b: int) -> NDArray[np.int64]:
    """Index array ``idx`` with ``idx[o]`` the source row for observation ``o``.

    Each subject's indices are a uniform random permutation of its own block.
    """
    keys = _stream(seed, b).random(design.n_obs)
    return np.lexsort((keys, design.subject_index))


def permute_within_subjects(design: LongitudinalDesign, basis, seed: int, b: int) -> NDArray:
    """Time-basis rows shuffled within each subject; ``y`` and covariates stay put."""
    phi = design.basis_matrix(basis)
    return phi[permutation_indices(design, seed, b)]


def permutation_statistics(
    null: NullFit,
    phi: NDArray,
    design: LongitudinalDesign,
    B: int,
    seed: int,
    sigma_xi_half: NDArray | None = None,
    mode: Mode = "heterogeneous",
    start: int = 0,
) -> NDArray[np.float64]:
    """``Q*_b`` for ``b = start, ..., start + B - 1`` via the observed-statistic code path."""
    out = np.empty(B)
    for k in range(B):
        idx = permutation_indices(design, seed, start + k)
        dec = score_from_null(null, phi[idx], design, sigma_xi_half, mode, contributions=False)
        out[k] = statistic(dec)
    return out


def permutation_pvalue(q_obs: float, q_perm: NDArray, add_one: bool = False) -> float:
    """``B^-1 sum_b 1{q_obs <= Q*_b}``, or ``(1 + count) / (1 + B)`` with ``add_one``."""
    q_perm = np.asarray(q_perm, dtype=float)
    if q_perm.size < 1:
        raise ValidationError("need at least one permutation")
    # relative slack so exact ties (e.g. identity permutations) are counted as ties
    hits = int(np.count_nonzero(q_obs <= q_perm * (1 + 1e-12) + 1e-300))
    if add_one:
        return (1 + hits) / (1 + q_perm.size)
    return hits / q_perm.size


def check_permutation_count(B: int, alpha: float = 0.05) -> None:
    if B < 1:
        raise ValidationError("number of permutations must be >= 1")
    if B < 100 or B < 1.0 / alpha:
        warnings.warn(
            f"only {B} permutations; p-values are coarse at level {alpha}",
            stacklevel=3,
        )
