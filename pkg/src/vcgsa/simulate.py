"""Synthetic longitudinal RNA-seq regimes and a Monte Carlo rejection-rate driver.

Three regimes are provided:

* ``misspecified`` - continuous log-scale expression from a heavily
  misspecified mean model (optionally rounded up to positive integers);
* ``negbin`` - negative binomial counts with dispersion 1;
* ``poisson_gamma`` - small-sample Poisson-Gamma counts with a realistic
  baseline, in a homogeneous (shared slope ``beta``) and a heterogeneous
  (gene-specific slopes with sd ``sigma_gamma``) flavour.

Replicate ``r`` draws from a stream keyed by ``(seed, r)`` only, so every
grid value sees the same underlying randomness (common random numbers) and
serial and threaded runs agree exactly.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np
from numpy.typing import NDArray

from .analysis import Analysis
from .data_model import CountMatrix, GeneSet, LongitudinalDesign, TimeBasis, ValidationError
from .normalize import log_cpm

Regime = Literal["misspecified", "negbin", "poisson_gamma"]

# Eq. (5.1) constants
ALPHA_SCALE = 100.0  # alpha_j ~ Exponential with this mean
COVARIATE_MEAN = 100.0
COVARIATE_SD = 50.0
N_COVARIATES = 3
# per-gene normalizer of eta: observation average of eta_j divided by P
ETA_NORMALIZER = "mean"

# Eq. (5.2) constants
NB_BASE = 1001.0
NB_COVARIATE_MEAN_SCALE = 10.0
NB_DISPERSION = 1.0

# Poisson-Gamma constants
BCV_FLOOR = 0.2
BCV_DF = 40
BASELINE_LOG2_MEAN = 4.0
BASELINE_LOG2_SD = 2.0
BASELINE_RANGE = (1.0, 1e5)
SUBJECT_LOG2_SD = 0.5
SUBJECT_NOISE = 0.1
MIN_SET_CORRELATION = 0.8
HETERO_NOISE_VAR = 0.05

BETA_GRIDS = {
    "misspecified": (0.0, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0),
    "negbin": (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0),
    "poisson_gamma": (0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5),
}
SIGMA_GAMMA_GRID = (0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


@dataclass(frozen=True)
class SimConfig:
    """One simulation study.

    ``beta`` is the default effect when a generator is called directly;
    ``grid`` lists the values swept by :func:`run_study` (``sigma_gamma``
    values in the heterogeneous Poisson-Gamma variant).
    """

    regime: Regime = "misspecified"
    n: int = 200
    n_i: int = 3
    P: int = 1000
    p: int = 10
    beta: float = 0.0
    grid: tuple[float, ...] = (0.0,)
    replicates: int = 1000
    alpha: float = 0.05
    seed: int = 1
    heterogeneous: bool = False
    counts_output: bool = False
    weights: tuple[str, ...] = ("gene",)
    test: str = "asymptotic"
    mode: str = "heterogeneous"
    permutations: int = 200
    baseline_mu: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.regime not in BETA_GRIDS:
            raise ValidationError(f"unknown regime {self.regime!r}")
        for name in ("n", "n_i", "P", "p"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.p > self.P:
            raise ValidationError("gene set larger than the number of genes")
        if self.replicates < 1:
            raise ValidationError("at least one replicate is required")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.test not in ("asymptotic", "permutation", "both"):
            raise ValidationError(f"unknown test {self.test!r}")
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        object.__setattr__(self, "weights", tuple(self.weights))

    @property
    def parameter(self) -> str:
        return "sigma_gamma" if self.heterogeneous else "beta"


def default_config(regime: Regime, heterogeneous: bool = False, counts_output: bool = False, **kw) -> SimConfig:
    """Study settings used in the published simulations for each regime."""
    if regime == "misspecified" and counts_output:
        base = dict(n=100, n_i=5, P=100, p=10)
    elif regime == "misspecified":
        base = dict(n=200, n_i=3, P=1000, p=10, weights=("gene", "voom", "identity"))
    elif regime == "negbin":
        base = dict(n=100, n_i=5, P=100, p=10)
    elif heterogeneous:
        base = dict(n=18, n_i=3, P=1000, p=30, test="both", replicates=500)
    else:
        base = dict(n=6, n_i=3, P=1000, p=30, test="both", replicates=500)
    grid = SIGMA_GAMMA_GRID if heterogeneous else BETA_GRIDS[regime]
    base.update(regime=regime, heterogeneous=heterogeneous, counts_output=counts_output, grid=grid)
    base.update(kw)
    return SimConfig(**base)


@dataclass(frozen=True)
class SimDataset:
    """A generated dataset, columns already in design order.

    ``y`` is continuous expression for regimes without counts; otherwise
    ``counts`` is set and ``y`` is ``None``.
    """

    design: LongitudinalDesign
    gene_set: GeneSet
    y: NDArray | None = None
    counts: CountMatrix | None = None
    log_library: NDArray | None = None
    extra: dict = field(default_factory=dict)

    def analysis(self, weights: str = "gene", basis: TimeBasis | None = None, **kw) -> Analysis:
        if self.counts is not None:
            return Analysis.from_counts(self.counts, self.design, basis, weights, **kw)
        return Analysis(self.y, self.design, basis, weights, log_library=self.log_library, **kw)


def _ids(n: int, n_i: int):
    sub = [f"i{i:04d}" for i in range(n) for _ in range(n_i)]
    samp = [f"s{i:04d}_{t}" for i in range(n) for t in range(n_i)]
    return sub, samp


def _finish(cfg, y, times, cov, counts=False, log_library=None, extra=None) -> SimDataset:
    """Canonicalize generation-order columns (subject-major) into a dataset."""
    sub, samp = _ids(cfg.n, cfg.n_i)
    design, order = LongitudinalDesign.from_arrays(samp, sub, times, cov)
    gene_set = GeneSet("simulated", tuple(range(cfg.p)))
    y = y[:, order]
    lib = None if log_library is None else log_library[order]
    extra = {k: v[:, order] for k, v in (extra or {}).items()}
    if counts:
        genes = [f"g{j:05d}" for j in range(cfg.P)]
        cm = CountMatrix(y.astype(np.int64), genes, design.sample_ids)
        return SimDataset(design, gene_set, counts=cm, extra=extra or {})
    return SimDataset(design, gene_set, y=y, log_library=lib, extra=extra or {})


def _misspecified_log_values(cfg: SimConfig, rng: np.random.Generator, beta: float):
    n, n_i, P = cfg.n, cfg.n_i, cfg.P
    N = n * n_i
    subj = np.repeat(np.arange(n), n_i)
    alpha = rng.exponential(ALPHA_SCALE, P)
    a = rng.normal(0.0, 1.0, (n, P)) * (alpha / 10.0)
    x = rng.normal(COVARIATE_MEAN, COVARIATE_SD, (n, N_COVARIATES))
    t = rng.uniform(0.0, 1.0, N)
    b = rng.normal(0.0, 1.0, (n, P))
    eps = rng.normal(0.0, 1.0, (N, P)) * alpha

    eta = a[subj] + alpha + x.sum(axis=1)[subj, None] + eps
    if ETA_NORMALIZER == "mean":
        scale = eta.mean(axis=0) / P
    else:
        scale = eta.sum(axis=0) / P
    slope = np.zeros(P)
    slope[: cfg.p] = beta
    mu = eta * scale + (b[subj] + slope) * t[:, None]
    mu = np.maximum(mu, 0.0)
    # sum over subjects at the same observation index, per gene
    den = mu.reshape(n, n_i, P).sum(axis=0)
    den = np.tile(den, (n, 1))
    log_val = np.log((mu + 0.5) * 1e6 / (den + 1.0))
    return log_val.T, t, np.repeat(x, n_i, axis=0)


def gen_misspecified(cfg: SimConfig, rng: np.random.Generator, beta: float | None = None) -> SimDataset:
    """Continuous expression from the misspecified mean model."""
    beta = cfg.beta if beta is None else beta
    y, t, cov = _misspecified_log_values(cfg, rng, beta)
    return _finish(cfg, y, t, cov)


def gen_misspecified_counts(cfg: SimConfig, rng: np.random.Generator, beta: float | None = None) -> SimDataset:
    """Same draws as :func:`gen_misspecified`, mapped to ``max(ceil(value), 1)``."""
    beta = cfg.beta if beta is None else beta
    y, t, cov = _misspecified_log_values(cfg, rng, beta)
    integer = np.maximum(np.ceil(y), 1.0)
    return _finish(cfg, integer, t, cov, counts=True, extra={"pre_rounding": y})


def nb_counts(rng: np.random.Generator, mu: NDArray, dispersion: float = NB_DISPERSION) -> NDArray:
    """Negative binomial draws with mean ``mu`` and variance ``mu + dispersion * mu^2``."""
    mu = np.asarray(mu, dtype=float)
    size = 1.0 / dispersion
    p = size / (size + mu)
    return rng.negative_binomial(size, p)


def gen_negbin(cfg: SimConfig, rng: np.random.Generator, beta: float | None = None) -> SimDataset:
    beta = cfg.beta if beta is None else beta
    n, n_i, P = cfg.n, cfg.n_i, cfg.P
    N = n * n_i
    subj = np.repeat(np.arange(n), n_i)
    a0 = rng.normal(0.0, 1.0, n)
    mu_x = rng.exponential(NB_COVARIATE_MEAN_SCALE, n)
    x = rng.normal(mu_x, 1.0)
    b = rng.normal(0.0, 1.0, n)
    beta_j = rng.normal(0.0, 1.0, P)
    t = rng.uniform(0.0, 1.0, N)
    slope = beta_j.copy()
    slope[: cfg.p] += beta
    xs = x[subj]
    mu = NB_BASE + a0[subj, None] + xs[:, None] + (b[subj, None] + slope) * (t * xs)[:, None]
    mu = np.maximum(mu, 0.0)
    counts = nb_counts(rng, mu).T
    return _finish(cfg, counts, t, xs[:, None], counts=True)


def default_baseline(rng: np.random.Generator, size: int) -> NDArray[np.float64]:
    """Log-normal baseline expected counts, log2-mean 4 and log2-sd 2, truncated."""
    lo, hi = BASELINE_RANGE
    out = np.empty(size)
    filled = 0
    while filled < size:
        draw = 2.0 ** rng.normal(BASELINE_LOG2_MEAN, BASELINE_LOG2_SD, size)
        keep = draw[(draw >= lo) & (draw <= hi)]
        take = min(size - filled, keep.size)
        out[filled : filled + take] = keep[:take]
        filled += take
    return out


def _subject_gene_means(cfg: SimConfig, rng: np.random.Generator) -> NDArray[np.float64]:
    """``mu_ij`` (n x P); the first p genes share a subject factor."""
    if cfg.baseline_mu is not None:
        pool = np.asarray(cfg.baseline_mu, dtype=float)
        level = rng.choice(pool, size=cfg.P, replace=True)
    else:
        level = default_baseline(rng, cfg.P)
    factor = rng.normal(0.0, SUBJECT_LOG2_SD, cfg.n)
    own = rng.normal(0.0, SUBJECT_LOG2_SD, (cfg.n, cfg.P))
    noise = rng.normal(0.0, SUBJECT_LOG2_SD * SUBJECT_NOISE, (cfg.n, cfg.p))
    log2_dev = own.copy()
    log2_dev[:, : cfg.p] = factor[:, None] + noise
    mu = level * 2.0**log2_dev
    if cfg.p > 1 and cfg.n > 2:
        for _ in range(100):
            corr = np.corrcoef(mu[:, : cfg.p].T)
            bad = np.where((corr < MIN_SET_CORRELATION).any(axis=0))[0]
            if bad.size == 0:
                break
            fresh = rng.normal(0.0, SUBJECT_LOG2_SD * SUBJECT_NOISE, (cfg.n, bad.size))
            mu[:, bad] = level[bad] * 2.0 ** (factor[:, None] + fresh)
        else:
            raise ValidationError("could not build a gene set with pairwise correlation > 0.8")
    return mu


def _poisson_gamma(rng, mu_obs, kappa):
    """Poisson counts whose Gamma rate has mean ``mu_obs`` and BCV ``0.2 + mu^-1/2``."""
    bcv = (BCV_FLOOR + 1.0 / np.sqrt(mu_obs)) * np.sqrt(BCV_DF / kappa)
    shape = 1.0 / bcv**2
    lam = rng.gamma(shape, mu_obs / shape)
    return rng.poisson(lam)


def gen_poisson_gamma(
    cfg: SimConfig, rng: np.random.Generator, value: float | None = None
) -> SimDataset:
    """Small-sample Poisson-Gamma counts observed at times 1, ..., n_i.

    Homogeneous flavour: set genes have expected count ``mu_ij + beta t``.
    Heterogeneous flavour (``cfg.heterogeneous``): log-cpm plus
    ``gamma_j t + eps`` with ``gamma_j ~ N(0, sigma_gamma^2)`` and
    ``eps ~ N(0, 0.05)``; returns continuous expression.
    """
    value = cfg.beta if value is None else value
    n, n_i, P = cfg.n, cfg.n_i, cfg.P
    subj = np.repeat(np.arange(n), n_i)
    t = np.tile(np.arange(1, n_i + 1, dtype=float), n)
    mu = _subject_gene_means(cfg, rng)
    kappa = rng.chisquare(BCV_DF, (n, P))[subj]
    mu_obs = mu[subj].copy()
    if not cfg.heterogeneous:
        mu_obs[:, : cfg.p] += value * t[:, None]
        if np.any(mu_obs <= 0):
            raise ValidationError("non-positive mean mu + beta t; beta too negative")
        counts = _poisson_gamma(rng, mu_obs, kappa).T
        return _finish(cfg, counts, t, None, counts=True)

    counts = _poisson_gamma(rng, mu_obs, kappa).T
    norm = log_cpm(counts)
    gamma = rng.normal(0.0, 1.0, P) * value
    gamma[cfg.p :] = 0.0
    eps = rng.normal(0.0, math.sqrt(HETERO_NOISE_VAR), counts.shape)
    y = norm.y + gamma[:, None] * t[None, :] + eps
    return _finish(cfg, y, t, None, log_library=np.log2(1.0 + norm.library_sizes))


def generate(cfg: SimConfig, rng: np.random.Generator, value: float | None = None) -> SimDataset:
    if cfg.regime == "misspecified":
        gen = gen_misspecified_counts if cfg.counts_output else gen_misspecified
        return gen(cfg, rng, value)
    if cfg.regime == "negbin":
        return gen_negbin(cfg, rng, value)
    return gen_poisson_gamma(cfg, rng, value)


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, replicate]))


def replicate_perm_seed(seed: int, replicate: int) -> int:
    state = np.random.SeedSequence([seed, replicate, 1]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


@dataclass(frozen=True)
class StudyRow:
    regime: str
    parameter: str
    value: float
    weights: str
    test: str
    mode: str
    replicates: int
    rejections: int

    @property
    def rate(self) -> float:
        return self.rejections / self.replicates

    @property
    def se(self) -> float:
        r = self.rate
        return math.sqrt(r * (1.0 - r) / self.replicates)


def _one_replicate(cfg: SimConfig, r: int) -> dict:
    """Rejection indicators for every (grid value, weights, test) of replicate ``r``."""
    tests = ("asymptotic", "permutation") if cfg.test == "both" else (cfg.test,)
    perm_seed = replicate_perm_seed(cfg.seed, r)
    out = {}
    for value in cfg.grid:
        data = generate(cfg, replicate_rng(cfg.seed, r), value)
        for w in cfg.weights:
            res = data.analysis(w).test(
                data.gene_set,
                mode=cfg.mode,
                test=cfg.test,
                n_permutations=cfg.permutations,
                seed=perm_seed,
                alpha=cfg.alpha,
            )
            for kind in tests:
                p = res.p_asymptotic if kind == "asymptotic" else res.p_permutation
                out[(value, w, kind)] = p <= cfg.alpha
    return out


def run_study(cfg: SimConfig, workers: int = 1) -> list[StudyRow]:
    """Empirical rejection rates over ``cfg.replicates`` replicates."""
    import warnings

    tests = ("asymptotic", "permutation") if cfg.test == "both" else (cfg.test,)
    keys = [(v, w, k) for v in cfg.grid for w in cfg.weights for k in tests]
    counts = dict.fromkeys(keys, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = pool.map(lambda r: _one_replicate(cfg, r), range(cfg.replicates))
                for res in results:
                    for key, hit in res.items():
                        counts[key] += bool(hit)
        else:
            for r in range(cfg.replicates):
                for key, hit in _one_replicate(cfg, r).items():
                    counts[key] += bool(hit)
    return [
        StudyRow(cfg.regime, cfg.parameter, v, w, k, cfg.mode, cfg.replicates, counts[(v, w, k)])
        for (v, w, k) in keys
    ]


STUDY_COLUMNS = ("regime", "parameter", "value", "weights", "test", "mode", "replicates", "rejections", "rate", "se")


def study_csv(rows: Sequence[StudyRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STUDY_COLUMNS)
    for row in rows:
        writer.writerow(
            [row.regime, row.parameter, f"{row.value:g}", row.weights, row.test, row.mode,
             row.replicates, row.rejections, f"{row.rate:.10g}", f"{row.se:.10g}"]
        )
    return buf.getvalue()
