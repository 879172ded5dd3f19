"""End-to-end gene set testing over one shared dataset.

:class:`Analysis` computes everything that depends on all genes once
(precision weights, the mean-variance trend) and then tests any number of
gene sets against it. Instances are read-only after construction and can be
shared across threads.
"""

from __future__ import annotations

import logging
from typing import Iterable, Literal, Sequence

import numpy as np
from numpy.typing import NDArray

from .data_model import (
    CountMatrix,
    GeneSet,
    LongitudinalDesign,
    SampleMeta,
    TestResult,
    TimeBasis,
    ValidationError,
    validate_dataset,
)
from .meanvar import Kernel, MeanVarianceModel, fit_genes, variance_weights
from .normalize import log_cpm, voom_weights_from_y
from .permutation import check_permutation_count, permutation_pvalue, permutation_statistics
from .vcscore import (
    Centering,
    Mode,
    chisq_mixture_pvalue,
    fit_null,
    mixture_weights,
    score_from_null,
    sqrt_psd,
    statistic,
)

logger = logging.getLogger(__name__)

WeightStrategy = Literal["gene", "observation", "voom", "identity"]
TestKind = Literal["asymptotic", "permutation", "both"]

WEIGHT_ALIASES = {
    "gene": "gene",
    "gene_level": "gene",
    "obs": "observation",
    "observation": "observation",
    "observation_level": "observation",
    "voom": "voom",
    "identity": "identity",
}
MODE_ALIASES = {
    "hetero": "heterogeneous",
    "heterogeneous": "heterogeneous",
    "homo": "homogeneous",
    "homogeneous": "homogeneous",
}


def compute_weights(
    y: NDArray,
    design: LongitudinalDesign,
    phi: NDArray,
    strategy: WeightStrategy,
    kernel: Kernel = "gaussian",
    bandwidth: float | None = None,
    log_library: NDArray | None = None,
) -> tuple[NDArray[np.float64], MeanVarianceModel | None]:
    """Precision weights for all genes (``P x n_obs``) under one strategy."""
    strategy = WEIGHT_ALIASES.get(strategy, strategy)
    if strategy == "identity":
        return np.ones_like(y), None
    X = np.column_stack([design.null_matrix(), phi])
    if strategy == "voom":
        return voom_weights_from_y(y, X, log_library), None
    if strategy in ("gene", "observation"):
        fits = fit_genes(y, design, phi)
        return variance_weights(fits, design, strategy, kernel, bandwidth)
    raise ValidationError(f"unknown weight strategy {strategy!r}")


class Analysis:
    """Normalized expression, design and precision weights for all genes.

    Parameters
    ----------
    y : (P, n_obs) array
        Normalized expression, columns in design order.
    design : LongitudinalDesign
    basis : TimeBasis
    weights : {"gene", "observation", "voom", "identity"}
    kernel, bandwidth :
        Smoother settings for the gene/observation strategies; ``bandwidth``
        ``None`` selects it by cross-validation.
    log_library : (n_obs,) array, optional
        ``log2(1 + library size)``, used by voom for count-derived data.
    """

    def __init__(
        self,
        y: NDArray,
        design: LongitudinalDesign,
        basis: TimeBasis | None = None,
        weights: WeightStrategy = "gene",
        kernel: Kernel = "gaussian",
        bandwidth: float | None = None,
        log_library: NDArray | None = None,
        gene_ids: Sequence[str] | None = None,
    ):
        y = np.asarray(y, dtype=float)
        if y.ndim != 2 or y.shape[1] != design.n_obs:
            raise ValidationError(f"expression shape {y.shape} does not fit {design.n_obs} samples")
        if not np.all(np.isfinite(y)):
            raise ValidationError("expression matrix has non-finite values")
        self.y = y
        self.y.setflags(write=False)
        self.design = design
        self.basis = basis or TimeBasis("linear")
        self.strategy = WEIGHT_ALIASES.get(weights, weights)
        self.kernel = kernel
        self.log_library = log_library
        self.gene_ids = tuple(gene_ids) if gene_ids is not None else None
        self.phi = design.basis_matrix(self.basis)
        self.weights, self.mean_variance = compute_weights(
            y, design, self.phi, self.strategy, kernel, bandwidth, log_library
        )
        self.weights.setflags(write=False)
        self.bandwidth = None if self.mean_variance is None else self.mean_variance.bandwidth

    @classmethod
    def from_counts(
        cls,
        counts: CountMatrix,
        meta: Iterable[SampleMeta] | LongitudinalDesign,
        basis: TimeBasis | None = None,
        weights: WeightStrategy = "gene",
        kernel: Kernel = "gaussian",
        bandwidth: float | None = None,
    ) -> "Analysis":
        if isinstance(meta, LongitudinalDesign):
            design = meta
            counts = counts.select_samples(design.sample_ids)
        else:
            design, counts = validate_dataset(counts, meta)
        norm = log_cpm(counts)
        return cls(
            norm.y,
            design,
            basis,
            weights,
            kernel,
            bandwidth,
            log_library=np.log2(1.0 + norm.library_sizes),
            gene_ids=counts.gene_ids,
        )

    @property
    def n_genes(self) -> int:
        return self.y.shape[0]

    def test(
        self,
        gene_set: GeneSet,
        mode: Mode = "heterogeneous",
        test: TestKind = "asymptotic",
        n_permutations: int = 1000,
        seed: int = 0,
        sigma_xi: NDArray | None = None,
        centering: Centering = "null",
        add_one: bool = False,
        recompute_weights: bool = False,
        method: str = "auto",
        alpha: float = 0.05,
    ) -> TestResult:
        """Test one gene set.

        ``sigma_xi`` is the working covariance of the time random effects
        (``pK x pK`` heterogeneous, ``K x K`` homogeneous); identity when
        omitted. ``recompute_weights`` refits the precision weights on every
        permuted dataset (bandwidth held at its observed-data value).
        """
        mode = MODE_ALIASES.get(mode, mode)
        if mode not in ("heterogeneous", "homogeneous"):
            raise ValidationError(f"unknown mode {mode!r}")
        if test not in ("asymptotic", "permutation", "both"):
            raise ValidationError(f"unknown test kind {test!r}")
        gene_set.check_range(self.n_genes)
        idx = list(gene_set.gene_indices)
        y_set = self.y[idx]
        w_set = self.weights[idx]
        half = None if sigma_xi is None else sqrt_psd(sigma_xi)

        null = fit_null(y_set, self.design, w_set, centering, self.phi)
        dec = score_from_null(null, self.phi, self.design, half, mode)
        Q = statistic(dec)
        law = mixture_weights(dec)
        diagnostics: list[str] = []

        p_asym = None
        if test in ("asymptotic", "both"):
            if Q > 0 and law.total == 0:
                diagnostics.append("all mixing eigenvalues are zero")
            p_asym = chisq_mixture_pvalue(Q, law, method)

        p_perm = None
        B = None
        summary: dict = {}
        if test in ("permutation", "both"):
            B = int(n_permutations)
            check_permutation_count(B, alpha)
            if recompute_weights:
                q_perm = self._permutation_statistics_reweighted(idx, half, mode, B, seed, centering)
            else:
                q_perm = permutation_statistics(null, self.phi, self.design, B, seed, half, mode)
            p_perm = permutation_pvalue(Q, q_perm, add_one)
            summary = {
                "mean": float(q_perm.mean()),
                "sd": float(q_perm.std()),
                "max": float(q_perm.max()),
                "n_ge_observed": int(round(p_perm * B)) if not add_one else None,
            }

        return TestResult(
            set_name=gene_set.name,
            statistic=Q,
            mixing_eigenvalues=law.eigenvalues,
            p_asymptotic=p_asym,
            p_permutation=p_perm,
            n_permutations=B,
            mode=mode,
            n_genes=gene_set.p,
            seed=seed if B is not None else None,
            diagnostics=tuple(diagnostics),
            permutation_summary=summary,
        )

    def _permutation_statistics_reweighted(self, idx, half, mode, B, seed, centering):
        from .permutation import permutation_indices

        out = np.empty(B)
        for b in range(B):
            perm = permutation_indices(self.design, seed, b)
            phi_b = self.phi[perm]
            w_all, _ = compute_weights(
                self.y, self.design, phi_b, self.strategy, self.kernel, self.bandwidth, self.log_library
            )
            null = fit_null(self.y[idx], self.design, w_all[idx], centering, phi_b)
            dec = score_from_null(null, phi_b, self.design, half, mode, contributions=False)
            out[b] = statistic(dec)
        return out


def _resolve_set(analysis: Analysis, gene_set: GeneSet | Sequence[int]) -> GeneSet:
    if isinstance(gene_set, GeneSet):
        return gene_set
    return GeneSet("set", tuple(gene_set))


def asymptotic_test(
    counts: CountMatrix,
    meta: Iterable[SampleMeta],
    gene_set: GeneSet | Sequence[int],
    basis: TimeBasis | None = None,
    weight_strategy: WeightStrategy = "gene",
    mode: Mode = "heterogeneous",
    **kwargs,
) -> TestResult:
    """log-CPM, weights, null fits, score, mixture law and p-value for one set."""
    analysis = Analysis.from_counts(counts, meta, basis, weight_strategy)
    return analysis.test(_resolve_set(analysis, gene_set), mode, "asymptotic", **kwargs)


def permutation_test(
    counts: CountMatrix,
    meta: Iterable[SampleMeta],
    gene_set: GeneSet | Sequence[int],
    basis: TimeBasis | None = None,
    weight_strategy: WeightStrategy = "gene",
    mode: Mode = "heterogeneous",
    B: int = 1000,
    seed: int = 0,
    **kwargs,
) -> TestResult:
    """Within-subject permutation p-value; weights and null fits are computed once."""
    analysis = Analysis.from_counts(counts, meta, basis, weight_strategy)
    return analysis.test(
        _resolve_set(analysis, gene_set), mode, "permutation", n_permutations=B, seed=seed, **kwargs
    )
