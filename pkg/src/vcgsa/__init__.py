"""Variance component score tests for longitudinal RNA-seq gene sets."""

from .analysis import Analysis, asymptotic_test, compute_weights, permutation_test
from .data_model import (
    CountMatrix,
    GeneSet,
    LongitudinalDesign,
    NumericalError,
    SampleMeta,
    TestResult,
    TimeBasis,
    ValidationError,
    validate_dataset,
)
from .meanvar import fit_gene, fit_genes, fit_mean_variance, local_linear_smooth, variance_weights
from .mixture import chisq_mixture_sf
from .normalize import log_cpm, voom_weights
from .permutation import permutation_pvalue, permute_within_subjects
from .vcscore import chisq_mixture_pvalue, mixture_weights, score_vector, statistic

__version__ = "0.1.0"

__all__ = [
    "Analysis",
    "CountMatrix",
    "GeneSet",
    "LongitudinalDesign",
    "NumericalError",
    "SampleMeta",
    "TestResult",
    "TimeBasis",
    "ValidationError",
    "asymptotic_test",
    "chisq_mixture_pvalue",
    "chisq_mixture_sf",
    "compute_weights",
    "fit_gene",
    "fit_genes",
    "fit_mean_variance",
    "local_linear_smooth",
    "log_cpm",
    "mixture_weights",
    "permutation_pvalue",
    "permutation_test",
    "permute_within_subjects",
    "score_vector",
    "statistic",
    "validate_dataset",
    "variance_weights",
    "voom_weights",
]
