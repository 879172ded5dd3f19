"""Log-counts-per-million and voom-style precision weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from statsmodels.nonparametric.smoothers_lowess import lowess

from .data_model import (
    CountMatrix,
    LongitudinalDesign,
    NumericalError,
    TimeBasis,
    ValidationError,
    _frozen,
)

LOWESS_FRAC = 0.5
LOWESS_ITER = 3
TREND_FLOOR = 1e-6
MIN_TREND_POINTS = 3


@dataclass(frozen=True)
class NormalizedMatrix:
    y: NDArray[np.float64]
    library_sizes: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen(self.y))
        object.__setattr__(self, "library_sizes", _frozen(self.library_sizes))


def log_cpm(counts: CountMatrix | NDArray) -> NormalizedMatrix:
    """``log2(1e6 * (r + 0.5) / (L + 1))`` with ``L`` the column sums."""
    r = np.asarray(counts.counts if isinstance(counts, CountMatrix) else counts, dtype=float)
    lib = r.sum(axis=0)
    y = np.log2(1e6 * (r + 0.5) / (lib + 1.0))
    return NormalizedMatrix(y=y, library_sizes=lib)


def voom_weights_from_y(
    y: NDArray,
    design_matrix: NDArray,
    log_library: NDArray | None = None,
    frac: float = LOWESS_FRAC,
    it: int = LOWESS_ITER,
) -> NDArray[np.float64]:
    """voom precision weights for a genes x observations matrix.

    ``log_library`` is ``log2(1 + L)`` per observation; when absent (data
    that never were counts) the count-scale offset is dropped and the trend
    is fit directly against average ``y``.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(design_matrix, dtype=float)
    if y.shape[1] != X.shape[0]:
        raise ValidationError("design rows do not match observations")
    coef, *_ = np.linalg.lstsq(X, y.T, rcond=None)
    fitted = (X @ coef).T
    s = np.sqrt(np.sum((y - fitted) ** 2, axis=1))
    root_s = np.sqrt(s)

    if log_library is None:
        offset = np.zeros(y.shape[1])
        r_tilde = y.mean(axis=1)
    else:
        offset = np.asarray(log_library, dtype=float) - np.log2(1e6)
        # mean log-cpm plus log2 of the geometric-mean library size, minus log2(1e6)
        r_tilde = y.mean(axis=1) + offset.mean()

    if np.ptp(root_s) == 0.0:
        trend = np.full(y.shape, root_s[0])
    else:
        if np.unique(r_tilde).size < MIN_TREND_POINTS:
            raise NumericalError("insufficient genes for trend fit")
        fit = lowess(root_s, r_tilde, frac=frac, it=it, return_sorted=True)
        xs, ys = _collapse_ties(fit[:, 0], fit[:, 1])
        trend = np.interp(fitted + offset, xs, ys)
    trend = np.maximum(trend, TREND_FLOOR)
    return trend**-4.0


def _collapse_ties(x, f):
    ux, inv = np.unique(x, return_inverse=True)
    return ux, np.bincount(inv, weights=f) / np.bincount(inv)


def voom_weights(
    counts: CountMatrix, design: LongitudinalDesign, basis: TimeBasis | None = None
) -> NDArray[np.float64]:
    """voom weights from raw counts whose columns follow ``design`` order.

    The per-gene regression uses the intercept, covariates and, when given,
    the time basis, so residual scales match the main analysis.
    """
    if tuple(counts.sample_ids) != tuple(design.sample_ids):
        raise ValidationError("count columns are not in design order")
    X = design.full_matrix(basis) if basis is not None else design.null_matrix()
    norm = log_cpm(counts)
    return voom_weights_from_y(norm.y, X, np.log2(1.0 + norm.library_sizes))
