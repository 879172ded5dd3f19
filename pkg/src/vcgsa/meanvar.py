"""Gene-wise fixed-effects fits and the nonparametric mean-variance trend.

Every gene is regressed on ``[1, x, phi(t)]``; fitted means and squared
residuals feed a local linear smoother ``omega(m)`` whose reciprocal gives
per-observation precision weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from .data_model import LongitudinalDesign, NumericalError, TimeBasis, ValidationError, _frozen

Kernel = Literal["gaussian", "epanechnikov"]
Level = Literal["gene", "observation"]

VARIANCE_FLOOR_REL = 1e-8
BANDWIDTH_GRID = (0.05, 2.0, 25)
CV_FOLDS = 5
MIN_SMOOTH_POINTS = 10
MIN_CV_POINTS = 20
# above this many points the smoother runs on count-weighted bins
MAX_EXACT_POINTS = 5000
N_BINS = 2000
_CHUNK = 2_000_000


def check_full_rank(X: NDArray, names: list[str] | None = None) -> None:
    """Raise naming the offending columns if ``X`` is column rank deficient."""
    X = np.asarray(X, dtype=float)
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return
    names = names or [f"col{k}" for k in range(X.shape[1])]
    kept: list[int] = []
    dropped = []
    for k in range(X.shape[1]):
        if np.linalg.matrix_rank(X[:, kept + [k]]) == len(kept) + 1:
            kept.append(k)
        else:
            dropped.append(names[k])
    raise ValidationError(
        f"design matrix is rank deficient; collinear columns: {', '.join(dropped)}"
    )


@dataclass(frozen=True)
class GeneFit:
    """Least-squares fit of one gene on ``[1, x, phi(t)]``."""

    alpha0: float
    alpha: NDArray[np.float64]
    beta: NDArray[np.float64]
    fitted: NDArray[np.float64]
    sq_resid: NDArray[np.float64]


@dataclass(frozen=True)
class GeneFits:
    """Batched fits for many genes sharing one design.

    ``coef`` is ``(P, 1 + q + K)``; ``fitted`` and ``sq_resid`` are
    ``(P, n_obs)``.
    """

    coef: NDArray[np.float64]
    fitted: NDArray[np.float64]
    sq_resid: NDArray[np.float64]
    q: int

    def __len__(self):
        return self.coef.shape[0]

    def __getitem__(self, j: int) -> GeneFit:
        c = self.coef[j]
        return GeneFit(
            alpha0=float(c[0]),
            alpha=c[1 : 1 + self.q].copy(),
            beta=c[1 + self.q :].copy(),
            fitted=self.fitted[j].copy(),
            sq_resid=self.sq_resid[j].copy(),
        )


def weighted_lstsq(X: NDArray, Y: NDArray, W: NDArray | None = None) -> NDArray:
    """Coefficients for each row of ``Y`` (genes x obs); ``W`` matches ``Y``.

    Returns ``(genes, columns)``. With ``W`` rows constant per gene the result
    equals ordinary least squares.
    """
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if W is None:
        coef, *_ = np.linalg.lstsq(X, Y.T, rcond=None)
        return coef.T
    W = np.broadcast_to(np.asarray(W, dtype=float), Y.shape)
    if np.any(W <= 0):
        raise ValidationError("weights must be strictly positive")
    # rows with identical weights across observations reduce to one OLS solve
    const = np.all(W == W[:, :1], axis=1)
    coef = np.empty((Y.shape[0], X.shape[1]))
    if const.any():
        sol, *_ = np.linalg.lstsq(X, Y[const].T, rcond=None)
        coef[const] = sol.T
    if (~const).any():
        Wv, Yv = W[~const], Y[~const]
        gram = np.einsum("jn,na,nb->jab", Wv, X, X)
        rhs = np.einsum("jn,na,jn->ja", Wv, X, Yv)
        coef[~const] = np.linalg.solve(gram, rhs[..., None])[..., 0]
    return coef


def fit_genes(
    Y: NDArray,
    design: LongitudinalDesign,
    basis: TimeBasis,
    weights: NDArray | None = None,
) -> GeneFits:
    """Fit every row of ``Y`` on ``[1, x, phi(t)]``.

    ``basis`` may also be a precomputed ``(n_obs, K)`` array of basis rows
    (e.g. permuted ones).
    """
    if isinstance(basis, TimeBasis):
        X = design.full_matrix(basis)
        names = design.column_names(basis)
    else:
        phi = np.asarray(basis, dtype=float).reshape(design.n_obs, -1)
        X = np.column_stack([design.null_matrix(), phi])
        names = design.column_names() + [f"phi{k + 1}" for k in range(phi.shape[1])]
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != X.shape[0]:
        raise ValidationError(f"{Y.shape[1]} observations but design has {X.shape[0]} rows")
    check_full_rank(X, names)
    coef = weighted_lstsq(X, Y, weights)
    fitted = coef @ X.T
    return GeneFits(coef=coef, fitted=fitted, sq_resid=(Y - fitted) ** 2, q=design.q)


def fit_gene(
    y_j: NDArray,
    design: LongitudinalDesign,
    basis: TimeBasis,
    weights: NDArray | None = None,
) -> GeneFit:
    w = None if weights is None else np.asarray(weights, dtype=float)[None, :]
    return fit_genes(np.asarray(y_j, dtype=float)[None, :], design, basis, w)[0]


def gene_level_moments(fit: GeneFit | GeneFits, design: LongitudinalDesign):
    """Subject-balanced averages of fitted means and squared residuals.

    Each subject counts once regardless of how many samples it has:
    ``m_j = n^-1 sum_i n_i^-1 sum_t fitted``, likewise for ``v_j``. Returns
    scalars for a single :class:`GeneFit` and arrays for :class:`GeneFits`.
    """
    w = design.subject_weights()
    m = fit.fitted @ w
    v = fit.sq_resid @ w
    if isinstance(fit, GeneFit):
        return float(m), float(v)
    return m, v


def _kernel(u: NDArray, kernel: Kernel) -> NDArray:
    if kernel == "gaussian":
        return np.exp(-0.5 * u * u)
    if kernel == "epanechnikov":
        return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)
    raise ValidationError(f"unknown kernel {kernel!r}")


def _local_linear(
    m: NDArray, v: NDArray, x: NDArray, h: float, kernel: Kernel, c: NDArray | None = None
) -> NDArray:
    """Raw local linear estimate at each ``x`` (no variance floor); ``c`` are point multiplicities."""
    out = np.empty(x.shape[0])
    step = max(1, _CHUNK // max(1, m.shape[0]))
    for lo in range(0, x.shape[0], step):
        xs = x[lo : lo + step]
        d = m[None, :] - xs[:, None]
        k = _kernel(d / h, kernel)
        if c is not None:
            k = k * c
        s0 = k.sum(axis=1)
        kd = k * d
        s1 = kd.sum(axis=1)
        s2 = (kd * d).sum(axis=1)
        t0 = k @ v
        t1 = kd @ v
        # sum_b v / sum_b with b = K (S2 - d S1)
        num = s2 * t0 - s1 * t1
        den = s2 * s0 - s1 * s1
        est = np.empty(xs.shape[0])
        ok = den > 1e-12 * np.maximum(s2 * s0, np.finfo(float).tiny)
        est[ok] = num[ok] / den[ok]
        # one effective support point: the line is undetermined, use the kernel mean
        nw = ~ok & (s0 > 0)
        est[nw] = t0[nw] / s0[nw]
        empty = s0 <= 0
        if empty.any():
            nearest = np.abs(d[empty]).argmin(axis=1)
            est[empty] = v[nearest]
        out[lo : lo + step] = est
    return out


@dataclass(frozen=True)
class MeanVarianceModel:
    """A fitted local linear trend of variance against mean."""

    m: NDArray[np.float64]
    v: NDArray[np.float64]
    bandwidth: float
    kernel: Kernel = "gaussian"
    level: Level = "gene"
    counts: NDArray[np.float64] | None = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).ravel()
        v = np.asarray(self.v, dtype=float).ravel()
        if m.shape != v.shape:
            raise ValidationError("mean and variance arrays differ in length")
        if self.counts is not None:
            c = np.asarray(self.counts, dtype=float).ravel()
            if c.shape != m.shape or np.any(c <= 0):
                raise ValidationError("bin counts must be positive, one per point")
            object.__setattr__(self, "counts", _frozen(c))
        n_points = m.size if self.counts is None else self.counts.sum()
        if n_points < MIN_SMOOTH_POINTS:
            raise ValidationError(f"need at least {MIN_SMOOTH_POINTS} points to smooth")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            raise ValidationError("non-finite mean-variance points")
        if not self.bandwidth > 0:
            raise ValidationError("bandwidth must be positive")
        _kernel(np.zeros(1), self.kernel)
        object.__setattr__(self, "m", _frozen(m))
        object.__setattr__(self, "v", _frozen(v))

    @property
    def v_min(self) -> float:
        top = float(self.v.max())
        return VARIANCE_FLOOR_REL * top if top > 0 else np.finfo(float).tiny

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.m.tolist(), self.v.tolist()))

    def __call__(self, x) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        est = _local_linear(self.m, self.v, x.ravel(), self.bandwidth, self.kernel, self.counts)
        return np.maximum(est, self.v_min).reshape(x.shape)


def local_linear_smooth(model: MeanVarianceModel, x):
    """Evaluate ``omega_hat`` at ``x`` (scalar or array)."""
    out = model(x)
    return float(out) if np.ndim(x) == 0 else out


def bandwidth_grid(m: NDArray) -> NDArray[np.float64]:
    lo, hi, num = BANDWIDTH_GRID
    spread = float(np.ptp(m))
    if spread <= 0:
        raise ValidationError("no mean spread; cannot smooth")
    return np.geomspace(lo, hi, num) * spread


def cv_errors(
    m: NDArray,
    v: NDArray,
    grid: NDArray,
    kernel: Kernel = "gaussian",
    folds: int = CV_FOLDS,
    c: NDArray | None = None,
) -> NDArray[np.float64]:
    """k-fold cross-validated squared prediction error for each bandwidth.

    Point ``k`` is held out in fold ``k % folds``; errors are weighted by ``c``.
    """
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    fold = np.arange(m.size) % folds
    err = np.zeros(len(grid))
    for f in range(folds):
        test = fold == f
        mt, vt = m[~test], v[~test]
        ct = None if c is None else c[~test]
        cw = 1.0 if c is None else c[test]
        for g, h in enumerate(grid):
            pred = _local_linear(mt, vt, m[test], h, kernel, ct)
            err[g] += np.sum(cw * (pred - v[test]) ** 2)
    return err


def select_bandwidth(points, kernel: Kernel = "gaussian", counts: NDArray | None = None) -> float:
    """Bandwidth minimizing 5-fold CV error over a log-spaced grid.

    ``points`` is a sequence of ``(m, v)`` pairs or an ``(N, 2)`` array.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < MIN_CV_POINTS:
        raise ValidationError(f"bandwidth selection needs at least {MIN_CV_POINTS} points")
    grid = bandwidth_grid(pts[:, 0])
    err = cv_errors(pts[:, 0], pts[:, 1], grid, kernel, c=counts)
    return float(grid[int(np.argmin(err))])


def bin_points(m: NDArray, v: NDArray, n_bins: int = N_BINS):
    """Pool points into equal-width mean bins: (mean m, mean v, count) per non-empty bin."""
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        raise ValidationError("no mean spread; cannot smooth")
    idx = np.minimum(((m - lo) / (hi - lo) * n_bins).astype(np.int64), n_bins - 1)
    c = np.bincount(idx, minlength=n_bins).astype(float)
    sm = np.bincount(idx, weights=m, minlength=n_bins)
    sv = np.bincount(idx, weights=v, minlength=n_bins)
    keep = c > 0
    return sm[keep] / c[keep], sv[keep] / c[keep], c[keep]


def fit_mean_variance(
    m: NDArray,
    v: NDArray,
    kernel: Kernel = "gaussian",
    bandwidth: float | None = None,
    level: Level = "gene",
) -> MeanVarianceModel:
    m = np.asarray(m, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    c = None
    if m.size > MAX_EXACT_POINTS:
        m, v, c = bin_points(m, v)
    if bandwidth is None:
        bandwidth = select_bandwidth(np.column_stack([m, v]), kernel, c)
    return MeanVarianceModel(m=m, v=v, bandwidth=float(bandwidth), kernel=kernel, level=level, counts=c)


def variance_weights(
    fits: GeneFits,
    design: LongitudinalDesign,
    level: Level = "gene",
    kernel: Kernel = "gaussian",
    bandwidth: float | None = None,
) -> tuple[NDArray[np.float64], MeanVarianceModel]:
    """Per-observation weights ``1 / omega_hat(mean)`` for every gene.

    ``level="gene"`` smooths the subject-balanced gene moments and evaluates
    the trend at each gene mean, so a gene's weight is constant across its
    observations. ``level="observation"`` smooths all ``(fitted, sq_resid)``
    pairs and evaluates at each fitted value.
    """
    if level == "gene":
        m, v = gene_level_moments(fits, design)
        model = fit_mean_variance(m, v, kernel, bandwidth, "gene")
        w = 1.0 / model(m)
        weights = np.repeat(w[:, None], design.n_obs, axis=1)
    elif level == "observation":
        model = fit_mean_variance(fits.fitted, fits.sq_resid, kernel, bandwidth, "observation")
        if fits.fitted.size > MAX_EXACT_POINTS:
            # dense evaluation grid plus linear interpolation
            grid = np.linspace(fits.fitted.min(), fits.fitted.max(), 4 * N_BINS + 1)
            weights = 1.0 / np.interp(fits.fitted, grid, model(grid))
        else:
            weights = 1.0 / model(fits.fitted)
    else:
        raise ValidationError(f"unknown smoothing level {level!r}")
    if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
        raise NumericalError("non-positive or non-finite variance weights")
    return weights, model
