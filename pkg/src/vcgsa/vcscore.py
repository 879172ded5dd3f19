"""Variance component score statistic and its chi-square mixture null law.

For a gene set with null-model residuals ``r_ij`` (intercept and baseline
covariates only) and diagonal precision weights ``W_ij``, the score vector is

    q = n^-1/2 sum_i (W_i r_i)^T Phi_i Sigma_xi^1/2,      Q = q^T q.

Per-subject contributions use the time basis residualized against the null
design in each gene's weight metric, which folds the estimation of the
null coefficients into the contributions (their influence function). The
contributions still sum to ``sqrt(n) q`` because weighted residuals are
orthogonal to the null design; their covariance eigenvalues are the
mixing weights of the limiting ``sum a_l chi2_1`` law.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from .data_model import LongitudinalDesign, NumericalError, ValidationError, _frozen
from .meanvar import weighted_lstsq
from .mixture import Method, chisq_mixture_sf

Mode = Literal["heterogeneous", "homogeneous"]
Centering = Literal["null", "full"]

EIG_REL_TOL = 1e-10


@dataclass(frozen=True)
class NullFit:
    """Null-model residuals of one gene set, ready for scoring.

    ``residuals`` and ``weights`` are ``(p, n_obs)``; ``X0`` is the null design.
    """

    residuals: NDArray[np.float64]
    weights: NDArray[np.float64]
    X0: NDArray[np.float64]

    @property
    def weighted_residuals(self) -> NDArray[np.float64]:
        return self.residuals * self.weights


def fit_null(
    y_set: NDArray,
    design: LongitudinalDesign,
    weights: NDArray | None = None,
    centering: Centering = "null",
    phi: NDArray | None = None,
) -> NullFit:
    """Weighted least-squares fit of each gene on ``[1, x]``.

    ``centering="full"`` instead takes residuals from the unweighted fit that
    also includes the time basis ``phi`` (sensitivity option; with weights
    constant within each gene it makes the score identically zero).
    """
    Y = np.atleast_2d(np.asarray(y_set, dtype=float))
    X0 = design.null_matrix()
    if Y.shape[1] != X0.shape[0]:
        raise ValidationError(f"{Y.shape[1]} observations but design has {X0.shape[0]} rows")
    W = np.ones_like(Y) if weights is None else np.asarray(weights, dtype=float)
    if W.shape != Y.shape:
        raise ValidationError(f"weights shape {W.shape} does not match data {Y.shape}")
    if np.any(~np.isfinite(W)) or np.any(W <= 0):
        raise ValidationError("weights must be finite and strictly positive")
    if centering == "null":
        coef = weighted_lstsq(X0, Y, W)
        resid = Y - coef @ X0.T
    elif centering == "full":
        if phi is None:
            raise ValidationError("full centering needs the time basis")
        Xf = np.column_stack([X0, phi])
        coef = weighted_lstsq(Xf, Y)
        resid = Y - coef @ Xf.T
    else:
        raise ValidationError(f"unknown centering {centering!r}")
    # rounding-level residuals of an exact fit are zero
    tol = 64 * np.finfo(float).eps * np.abs(Y).max(axis=1, keepdims=True)
    resid[np.abs(resid) <= tol] = 0.0
    return NullFit(residuals=resid, weights=W, X0=X0)


def sqrt_psd(sigma: NDArray) -> NDArray[np.float64]:
    """Symmetric square root of a positive semi-definite matrix."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValidationError("Sigma_xi must be square")
    if not np.allclose(sigma, sigma.T, atol=1e-12 * max(1.0, np.abs(sigma).max())):
        raise ValidationError("Sigma_xi must be symmetric")
    vals, vecs = np.linalg.eigh(sigma)
    if vals.min() < -1e-10 * max(vals.max(), 1.0):
        raise ValidationError("Sigma_xi is not positive semi-definite")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def _check_half(half: NDArray | None, d: int) -> NDArray | None:
    if half is None:
        return None
    half = np.asarray(half, dtype=float)
    if half.shape != (d, d):
        raise ValidationError(f"Sigma_xi^1/2 must be {d}x{d}, got {half.shape}")
    if not np.allclose(half, half.T, atol=1e-12 * max(1.0, np.abs(half).max())):
        raise ValidationError("Sigma_xi^1/2 must be symmetric")
    vals = np.linalg.eigvalsh(half)
    if vals.min() < -1e-10 * max(vals.max(), 1.0):
        raise ValidationError("Sigma_xi^1/2 is not positive semi-definite")
    return half


@dataclass(frozen=True)
class ScoreDecomposition:
    """Score vector ``q_hat`` (length d) and per-subject contributions (n x d)."""

    q_hat: NDArray[np.float64]
    contributions: NDArray[np.float64] | None
    mode: Mode

    def __post_init__(self):
        object.__setattr__(self, "q_hat", _frozen(self.q_hat))
        if self.contributions is not None:
            object.__setattr__(self, "contributions", _frozen(self.contributions))

    @property
    def d(self) -> int:
        return self.q_hat.shape[0]

    @property
    def n(self) -> int:
        return 0 if self.contributions is None else self.contributions.shape[0]


def _collapse(arr: NDArray, mode: Mode) -> NDArray:
    """(..., p, K) -> (..., p*K) gene-major, or (..., K) summed over genes."""
    if mode == "heterogeneous":
        return arr.reshape(*arr.shape[:-2], -1)
    if mode == "homogeneous":
        return arr.sum(axis=-2)
    raise ValidationError(f"unknown mode {mode!r}")


def score_from_null(
    null: NullFit,
    phi: NDArray,
    design: LongitudinalDesign,
    sigma_xi_half: NDArray | None = None,
    mode: Mode = "heterogeneous",
    contributions: bool = True,
) -> ScoreDecomposition:
    """Score vector for basis rows ``phi`` (``(n_obs, K)``), aligned with observations."""
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    wr = null.weighted_residuals
    if phi.shape[0] != wr.shape[1]:
        raise ValidationError("basis rows do not match observations")
    n = design.n
    p, K = wr.shape[0], phi.shape[1]
    d = p * K if mode == "heterogeneous" else K
    half = _check_half(sigma_xi_half, d)

    q = _collapse(wr @ phi, mode) / np.sqrt(n)
    contrib = None
    if contributions:
        X0 = null.X0
        W = null.weights
        # A_j = (X0' W_j X0)^-1 X0' W_j Phi: projection of the basis on the null design
        gram = np.einsum("jn,na,nb->jab", W, X0, X0)
        cross = np.einsum("jn,na,nk->jak", W, X0, phi)
        A = np.linalg.solve(gram, cross)
        starts = design.block_starts
        raw = np.add.reduceat(wr[:, :, None] * phi[None, :, :], starts, axis=1)
        wx = np.add.reduceat(wr[:, :, None] * X0[None, :, :], starts, axis=1)
        per_gene = raw - np.einsum("jia,jak->jik", wx, A)
        contrib = _collapse(np.transpose(per_gene, (1, 0, 2)), mode)
        if half is not None:
            contrib = contrib @ half
    if half is not None:
        q = q @ half
    return ScoreDecomposition(q_hat=q, contributions=contrib, mode=mode)


def score_vector(
    y_set: NDArray,
    design: LongitudinalDesign,
    basis,
    weights: NDArray | None = None,
    sigma_xi_half: NDArray | None = None,
    mode: Mode = "heterogeneous",
    centering: Centering = "null",
) -> ScoreDecomposition:
    """Fit the null model to ``y_set`` (p x n_obs) and return its score decomposition."""
    phi = design.basis_matrix(basis)
    null = fit_null(y_set, design, weights, centering, phi)
    return score_from_null(null, phi, design, sigma_xi_half, mode)


def statistic(dec: ScoreDecomposition) -> float:
    return float(dec.q_hat @ dec.q_hat)


@dataclass(frozen=True)
class MixtureLaw:
    """Non-negative mixing weights, sorted descending."""

    eigenvalues: NDArray[np.float64]

    def __post_init__(self):
        lam = np.sort(np.asarray(self.eigenvalues, dtype=float).ravel())[::-1]
        if lam.size and lam[-1] < 0:
            raise ValidationError("mixing eigenvalues must be non-negative")
        object.__setattr__(self, "eigenvalues", _frozen(lam))

    @property
    def total(self) -> float:
        return float(self.eigenvalues.sum())


def clamp_eigenvalues(vals: NDArray) -> NDArray[np.float64]:
    vals = np.asarray(vals, dtype=float)
    top = vals.max() if vals.size else 0.0
    eps = EIG_REL_TOL * max(top, 0.0)
    if vals.size and vals.min() < -eps and vals.min() < -np.finfo(float).tiny:
        raise NumericalError(f"covariance eigenvalue {vals.min():.3e} is materially negative")
    return np.clip(vals, 0.0, None)


def mixture_weights(dec: ScoreDecomposition) -> MixtureLaw:
    """Eigenvalues of the sample covariance of the per-subject contributions."""
    C = dec.contributions
    if C is None:
        raise ValidationError("decomposition carries no contributions")
    n, d = C.shape
    if n < 2:
        raise ValidationError("cannot estimate contribution covariance from one subject")
    Cc = C - C.mean(axis=0)
    if d <= n:
        vals = np.linalg.eigvalsh(Cc.T @ Cc / (n - 1))
    else:
        # same non-zero spectrum from the smaller n x n Gram matrix
        vals = np.concatenate([np.linalg.eigvalsh(Cc @ Cc.T / (n - 1)), np.zeros(d - n)])
    return MixtureLaw(clamp_eigenvalues(vals))


def chisq_mixture_pvalue(Q: float, law: MixtureLaw, method: Method = "auto") -> float:
    """``P(sum a_l Z_l^2 >= Q)``; 1 when ``Q = 0``, 0 when all weights vanish."""
    return chisq_mixture_sf(Q, law.eigenvalues, method)
