"""Core data types: count matrices, sample metadata, longitudinal designs,
time bases, gene sets and test results.

All containers are frozen dataclasses wrapping read-only numpy arrays, so a
single instance can be shared between worker threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from numpy.typing import NDArray


class ValidationError(ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(RuntimeError):
    """A numerical routine could not produce a trustworthy answer."""


def _frozen(a, dtype=float) -> NDArray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CountMatrix:
    """Raw read counts, genes in rows and samples in columns."""

    counts: NDArray[np.int64]
    gene_ids: tuple[str, ...]
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        raw = np.asarray(self.counts)
        if raw.ndim != 2 or raw.shape[0] < 1 or raw.shape[1] < 1:
            raise ValidationError("counts must be a non-empty genes x samples matrix")
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise ValidationError("counts must be integral")
        elif raw.dtype.kind not in "iu":
            raise ValidationError(f"counts must be integers, got dtype {raw.dtype}")
        if np.any(raw < 0):
            raise ValidationError("counts must be non-negative")
        gene_ids = tuple(str(g) for g in self.gene_ids)
        sample_ids = tuple(str(s) for s in self.sample_ids)
        if len(gene_ids) != raw.shape[0] or len(sample_ids) != raw.shape[1]:
            raise ValidationError(
                f"id lengths ({len(gene_ids)}, {len(sample_ids)}) do not match "
                f"counts shape {raw.shape}"
            )
        for kind, ids in (("gene", gene_ids), ("sample", sample_ids)):
            if len(set(ids)) != len(ids):
                raise ValidationError(f"duplicate {kind} ids")
        object.__setattr__(self, "counts", _frozen(raw, np.int64))
        object.__setattr__(self, "gene_ids", gene_ids)
        object.__setattr__(self, "sample_ids", sample_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def select_samples(self, sample_ids: Sequence[str]) -> "CountMatrix":
        """Return the matrix with columns reordered to ``sample_ids``."""
        index = {s: k for k, s in enumerate(self.sample_ids)}
        try:
            cols = [index[s] for s in sample_ids]
        except KeyError as exc:
            raise ValidationError(f"unknown sample_id {exc.args[0]!r}") from None
        return CountMatrix(self.counts[:, cols], self.gene_ids, tuple(sample_ids))


@dataclass(frozen=True)
class SampleMeta:
    """One sequenced sample: its subject, its time and baseline covariates."""

    sample_id: str
    subject_id: str
    time: float
    covariates: tuple[float, ...] = ()

    def __post_init__(self):
        try:
            t = float(self.time)
        except (TypeError, ValueError):
            raise ValidationError(
                f"non-numeric time {self.time!r} for sample {self.sample_id!r}"
            ) from None
        if not math.isfinite(t):
            raise ValidationError(f"non-finite time for sample {self.sample_id!r}")
        try:
            cov = tuple(float(c) for c in self.covariates)
        except (TypeError, ValueError):
            raise ValidationError(
                f"non-numeric covariate for sample {self.sample_id!r}"
            ) from None
        if not all(math.isfinite(c) for c in cov):
            raise ValidationError(f"missing covariate value for sample {self.sample_id!r}")
        object.__setattr__(self, "sample_id", str(self.sample_id))
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "covariates", cov)


@dataclass(frozen=True)
class TimeBasis:
    """Basis expansion of time, ``phi(t) = (phi_1(t), ..., phi_K(t))``.

    ``linear`` is ``t``; ``polynomial`` is ``t, t**2, ..., t**degree``;
    ``spline`` is the piecewise-linear truncated power basis
    ``t, (t - k_1)_+, ..., (t - k_m)_+``. No constant column: the intercept
    belongs to the null model.
    """

    kind: Literal["linear", "polynomial", "spline"] = "linear"
    degree: int = 1
    knots: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial", "spline"):
            raise ValidationError(f"unknown basis kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 1:
            raise ValidationError("polynomial degree must be >= 1")
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))

    @property
    def K(self) -> int:
        if self.kind == "linear":
            return 1
        if self.kind == "polynomial":
            return self.degree
        return 1 + len(self.knots)

    @property
    def names(self) -> list[str]:
        if self.kind == "spline":
            return ["t"] + [f"(t-{k:g})+" for k in self.knots]
        return ["t"] + [f"t^{d}" for d in range(2, self.K + 1)]

    def evaluate(self, t) -> NDArray[np.float64]:
        """Basis rows for each time in ``t``; shape ``(len(t), K)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == "linear":
            return t[:, None].copy()
        if self.kind == "polynomial":
            return np.column_stack([t**d for d in range(1, self.degree + 1)])
        cols = [t] + [np.maximum(t - k, 0.0) for k in self.knots]
        return np.column_stack(cols)

    @classmethod
    def parse(cls, spec: str, times=None) -> "TimeBasis":
        """Build from a CLI string: ``linear``, ``poly:D`` or ``spline:M``.

        For ``spline:M`` the M interior knots are placed at equally spaced
        quantiles of the distinct ``times``.
        """
        kind, _, arg = spec.partition(":")
        if kind == "linear" and not arg:
            return cls("linear")
        if kind in ("poly", "polynomial"):
            return cls("polynomial", degree=int(arg))
        if kind == "spline":
            m = int(arg)
            if m < 1:
                raise ValidationError("spline needs at least one knot")
            if times is None:
                raise ValidationError("spline basis needs observed times to place knots")
            distinct = np.unique(np.asarray(times, dtype=float))
            knots = np.quantile(distinct, np.linspace(0, 1, m + 2)[1:-1])
            return cls("spline", knots=tuple(float(k) for k in knots))
        raise ValidationError(f"cannot parse basis {spec!r}")


@dataclass(frozen=True)
class GeneSet:
    name: str
    gene_indices: tuple[int, ...]
    description: str = ""

    def __post_init__(self):
        idx = tuple(int(i) for i in self.gene_indices)
        if len(idx) < 1:
            raise ValidationError(f"gene set {self.name!r} is empty")
        if len(set(idx)) != len(idx):
            raise ValidationError(f"gene set {self.name!r} has duplicate indices")
        if min(idx) < 0:
            raise ValidationError(f"gene set {self.name!r} has negative indices")
        object.__setattr__(self, "gene_indices", idx)

    @property
    def p(self) -> int:
        return len(self.gene_indices)

    def check_range(self, n_genes: int) -> None:
        if max(self.gene_indices) >= n_genes:
            raise ValidationError(f"gene set {self.name!r} indexes past {n_genes} genes")


@dataclass(frozen=True)
class TestResult:
    """Outcome of testing one gene set."""

    __test__ = False  # not a pytest class

    set_name: str
    statistic: float
    mixing_eigenvalues: NDArray[np.float64]
    p_asymptotic: float | None
    p_permutation: float | None
    n_permutations: int | None
    mode: Literal["heterogeneous", "homogeneous"]
    n_genes: int = 0
    seed: int | None = None
    diagnostics: tuple[str, ...] = ()
    permutation_summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.statistic >= 0:
            raise NumericalError(f"negative test statistic {self.statistic}")
        for p in (self.p_asymptotic, self.p_permutation):
            if p is not None and not 0.0 <= p <= 1.0:
                raise NumericalError(f"p-value {p} outside [0, 1]")
        object.__setattr__(self, "mixing_eigenvalues", _frozen(self.mixing_eigenvalues))

    @property
    def df_proxy(self) -> float:
        """Sum of mixing eigenvalues, the mean of the limiting law."""
        return float(np.sum(self.mixing_eigenvalues))

    @property
    def p_value(self) -> float | None:
        """Permutation p-value when available, else the asymptotic one."""
        return self.p_permutation if self.p_permutation is not None else self.p_asymptotic

    @property
    def test_kind(self) -> str:
        if self.p_asymptotic is not None and self.p_permutation is not None:
            return "both"
        return "permutation" if self.p_permutation is not None else "asymptotic"


@dataclass(frozen=True)
class LongitudinalDesign:
    """Samples grouped into contiguous per-subject blocks.

    Subjects are sorted by id; within a subject samples are sorted by time,
    ties broken by sample id. ``subject_index[k]`` is the block number of
    column ``k``.
    """

    sample_ids: tuple[str, ...]
    subject_ids: tuple[str, ...]
    subject_index: NDArray[np.int64]
    times: NDArray[np.float64]
    covariates: NDArray[np.float64]
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subject_index", _frozen(self.subject_index, np.int64))
        object.__setattr__(self, "times", _frozen(self.times))
        cov = np.asarray(self.covariates, dtype=float).reshape(len(self.sample_ids), -1)
        object.__setattr__(self, "covariates", _frozen(cov))
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(cov.shape[1]))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "_sizes", _frozen(np.bincount(self.subject_index), np.int64))

    @property
    def n(self) -> int:
        """Number of subjects."""
        return len(self.subject_ids)

    @property
    def n_obs(self) -> int:
        return len(self.sample_ids)

    @property
    def q(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_i(self) -> NDArray[np.int64]:
        return self._sizes

    @property
    def block_starts(self) -> NDArray[np.int64]:
        return np.concatenate([[0], np.cumsum(self._sizes)[:-1]])

    def subject_weights(self) -> NDArray[np.float64]:
        """Per-observation weights ``1 / (n * n_i)``: averaging subjects equally."""
        return 1.0 / (self.n * self._sizes[self.subject_index])

    def null_matrix(self) -> NDArray[np.float64]:
        """Null-model design ``[1, x]``, one row per observation."""
        return np.column_stack([np.ones(self.n_obs), self.covariates])

    def basis_matrix(self, basis: TimeBasis) -> NDArray[np.float64]:
        return basis.evaluate(self.times)

    def full_matrix(self, basis: TimeBasis) -> NDArray[np.float64]:
        return np.column_stack([self.null_matrix(), self.basis_matrix(basis)])

    def column_names(self, basis: TimeBasis | None = None) -> list[str]:
        names = ["intercept", *self.covariate_names]
        if basis is not None:
            names += basis.names
        return names

    def to_meta(self) -> list[SampleMeta]:
        return [
            SampleMeta(s, self.subject_ids[k], float(t), tuple(map(float, x)))
            for s, k, t, x in zip(self.sample_ids, self.subject_index, self.times, self.covariates)
        ]

    def __eq__(self, other):
        if not isinstance(other, LongitudinalDesign):
            return NotImplemented
        return (
            self.sample_ids == other.sample_ids
            and self.subject_ids == other.subject_ids
            and self.covariate_names == other.covariate_names
            and np.array_equal(self.subject_index, other.subject_index)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.covariates, other.covariates)
        )

    __hash__ = None

    @classmethod
    def from_arrays(
        cls,
        sample_ids: Sequence[str],
        subject_ids: Sequence[str],
        times,
        covariates=None,
        covariate_names: Sequence[str] = (),
    ) -> tuple["LongitudinalDesign", NDArray[np.int64]]:
        """Canonicalize per-sample arrays into a design.

        Returns the design and ``order``, the permutation taking input
        positions to block order (``design.sample_ids[k] == sample_ids[order[k]]``).
        """
        sample_ids = [str(s) for s in sample_ids]
        subject_ids = [str(s) for s in subject_ids]
        times = np.asarray(times, dtype=float)
        n_obs = len(sample_ids)
        cov = np.zeros((n_obs, 0)) if covariates is None else np.asarray(covariates, float)
        cov = cov.reshape(n_obs, -1)
        if len(set(sample_ids)) != n_obs:
            raise ValidationError("duplicate sample")
        if not np.all(np.isfinite(times)):
            raise ValidationError("non-numeric or non-finite time")
        if not np.all(np.isfinite(cov)):
            raise ValidationError("missing covariate value")
        order = np.array(
            sorted(range(n_obs), key=lambda k: (subject_ids[k], times[k], sample_ids[k])),
            dtype=np.int64,
        )
        subjects = sorted(set(subject_ids))
        sub_pos = {s: i for i, s in enumerate(subjects)}
        subject_index = np.array([sub_pos[subject_ids[k]] for k in order], dtype=np.int64)
        cov_sorted = cov[order]
        starts = np.searchsorted(subject_index, np.arange(len(subjects)))
        first = cov_sorted[starts]
        bad = np.any(cov_sorted != first[subject_index], axis=1)
        if bad.any():
            sid = subjects[subject_index[np.argmax(bad)]]
            raise ValidationError(f"subject {sid!r} has inconsistent covariates")
        design = cls(
            sample_ids=tuple(sample_ids[k] for k in order),
            subject_ids=tuple(subjects),
            subject_index=subject_index,
            times=times[order],
            covariates=cov_sorted,
            covariate_names=tuple(covariate_names),
        )
        return design, order


def validate_dataset(
    counts: CountMatrix,
    meta: Iterable[SampleMeta],
    covariate_names: Sequence[str] = (),
) -> tuple[LongitudinalDesign, CountMatrix]:
    """Check metadata against the count columns and build the design.

    Returns the design together with the count matrix reindexed to the
    design's block order.
    """
    meta = list(meta)
    seen: set[str] = set()
    for m in meta:
        if m.sample_id in seen:
            raise ValidationError(f"duplicate sample {m.sample_id!r}")
        seen.add(m.sample_id)
    columns = set(counts.sample_ids)
    unknown = sorted(seen - columns)
    if unknown:
        raise ValidationError(f"unknown sample_id {unknown[0]!r}")
    unmapped = [s for s in counts.sample_ids if s not in seen]
    if unmapped:
        raise ValidationError(f"unmapped sample {unmapped[0]!r}")
    widths = {len(m.covariates) for m in meta}
    if len(widths) > 1:
        raise ValidationError("samples have differing numbers of covariates")
    q = widths.pop() if widths else 0
    design, _ = LongitudinalDesign.from_arrays(
        [m.sample_id for m in meta],
        [m.subject_id for m in meta],
        [m.time for m in meta],
        np.array([m.covariates for m in meta], dtype=float).reshape(len(meta), q),
        covariate_names,
    )
    return design, counts.select_samples(design.sample_ids)
