"""Flat-file ingestion, results persistence and multiplicity adjustment."""

from __future__ import annotations

import csv
import json
import os
import platform
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .data_model import CountMatrix, GeneSet, SampleMeta, TestResult, ValidationError

MIN_SET_SIZE = 2
RESULT_COLUMNS = (
    "set",
    "p_genes_matched",
    "mode",
    "statistic",
    "df_proxy",
    "p_raw",
    "p_adjusted",
    "test_kind",
    "B",
    "seed",
    "p_asymptotic",
    "p_permutation",
)


def fmt(x) -> str:
    """10 significant digits; scientific notation below 1e-4; ``NA`` for missing."""
    if x is None:
        return "NA"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".10g")


def _rows(path) -> list[list[str]]:
    try:
        with open(path, newline="") as fh:
            return [row for row in csv.reader(fh, delimiter="\t") if row and any(c.strip() for c in row)]
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc


def read_counts_tsv(path) -> CountMatrix:
    """Counts TSV: header of sample ids (first cell ignored), one gene per row."""
    rows = _rows(path)
    if len(rows) < 2:
        raise ValidationError(f"{path}: counts file needs a header and at least one gene")
    samples = [s.strip() for s in rows[0][1:]]
    genes, values = [], []
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != len(samples) + 1:
            raise ValidationError(f"{path}:{k}: expected {len(samples) + 1} fields, got {len(row)}")
        genes.append(row[0].strip())
        try:
            values.append([float(c) for c in row[1:]])
        except ValueError as exc:
            raise ValidationError(f"{path}:{k}: non-numeric count") from exc
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
        raise ValidationError(f"{path}: counts must be integers")
    return CountMatrix(arr.astype(np.int64), genes, samples)


def write_counts_tsv(counts: CountMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["gene_id", *counts.sample_ids])
        for g, row in zip(counts.gene_ids, counts.counts):
            w.writerow([g, *map(int, row)])


def read_meta_tsv(path) -> tuple[list[SampleMeta], tuple[str, ...]]:
    """Sample sheet with columns sample_id, subject_id, time, then covariates."""
    rows = _rows(path)
    if not rows:
        raise ValidationError(f"{path}: empty metadata file")
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["sample_id", "subject_id", "time"]:
        raise ValidationError(f"{path}: header must start with sample_id, subject_id, time")
    cov_names = tuple(header[3:])
    meta = []
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValidationError(f"{path}:{k}: expected {len(header)} fields, got {len(row)}")
        try:
            t = float(row[2])
        except ValueError as exc:
            raise ValidationError(f"{path}:{k}: non-numeric time {row[2]!r}") from exc
        try:
            cov = tuple(float(c) for c in row[3:])
        except ValueError as exc:
            raise ValidationError(f"{path}:{k}: missing or non-numeric covariate") from exc
        meta.append(SampleMeta(row[0].strip(), row[1].strip(), t, cov))
    return meta, cov_names


def write_meta_tsv(meta: Iterable[SampleMeta], path, covariate_names: Sequence[str] = ()) -> None:
    meta = list(meta)
    q = len(meta[0].covariates) if meta else len(covariate_names)
    names = list(covariate_names) or [f"x{k + 1}" for k in range(q)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", "subject_id", "time", *names])
        for m in meta:
            w.writerow([m.sample_id, m.subject_id, repr(float(m.time)), *(repr(float(c)) for c in m.covariates)])


@dataclass(frozen=True)
class GmtReport:
    """Per-set matching summary: requested ids, matched count, unmatched ids."""

    name: str
    requested: int
    matched: int
    unmatched: tuple[str, ...]
    skipped: bool


def read_gmt(
    path, gene_ids: Sequence[str], min_size: int = MIN_SET_SIZE
) -> tuple[list[GeneSet], list[GmtReport]]:
    """One :class:`GeneSet` per GMT line, matched case-sensitively to ``gene_ids``.

    Sets with fewer than ``min_size`` matched genes are skipped with a warning.
    """
    index = {g: k for k, g in enumerate(gene_ids)}
    sets, report = [], []
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise ValidationError(f"{path}:{lineno}: malformed GMT line (fewer than 3 tab fields)")
        name, desc = fields[0].strip(), fields[1].strip()
        genes = [g.strip() for g in fields[2:] if g.strip()]
        unique = list(dict.fromkeys(genes))
        if len(unique) < len(genes):
            warnings.warn(f"gene set {name}: {len(genes) - len(unique)} duplicate gene ids removed", stacklevel=2)
        matched = [index[g] for g in unique if g in index]
        unmatched = tuple(g for g in unique if g not in index)
        skip = len(matched) < max(min_size, 1)
        if skip:
            warnings.warn(f"gene set {name}: only {len(matched)} of {len(unique)} genes matched; skipped", stacklevel=2)
        else:
            sets.append(GeneSet(name, tuple(matched), desc))
        report.append(GmtReport(name, len(unique), len(matched), unmatched, skip))
    return sets, report


def bh_adjust(pvalues) -> NDArray[np.float64]:
    """Benjamini-Hochberg step-up adjusted p-values."""
    p = np.asarray(pvalues, dtype=float).ravel()
    if p.size == 0:
        return p
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValidationError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


@dataclass(frozen=True)
class ResultsTable:
    results: tuple[TestResult, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "results", tuple(self.results))

    @property
    def p_raw(self) -> NDArray[np.float64]:
        return np.array([np.nan if r.p_value is None else r.p_value for r in self.results])

    @property
    def adjusted_p(self) -> NDArray[np.float64]:
        raw = self.p_raw
        out = np.full(raw.shape, np.nan)
        ok = ~np.isnan(raw)
        out[ok] = bh_adjust(raw[ok])
        return out

    def rows(self) -> list[list[str]]:
        adj = self.adjusted_p
        out = []
        for r, a in zip(self.results, adj):
            out.append(
                [
                    r.set_name,
                    fmt(r.n_genes),
                    r.mode,
                    fmt(r.statistic),
                    fmt(r.df_proxy),
                    fmt(r.p_value),
                    fmt(None if np.isnan(a) else a),
                    r.test_kind,
                    fmt(r.n_permutations),
                    fmt(r.seed),
                    fmt(r.p_asymptotic),
                    fmt(r.p_permutation),
                ]
            )
        return out


def run_timestamp() -> str:
    """UTC timestamp, pinned by ``SOURCE_DATE_EPOCH`` when set."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def versions() -> dict:
    import scipy
    import statsmodels

    from . import __version__

    return {
        "vcgsa": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "statsmodels": statsmodels.__version__,
    }


def write_results(table: ResultsTable, path) -> Path:
    """TSV of per-set results plus ``<path>.json`` with run metadata and diagnostics."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(RESULT_COLUMNS)
            w.writerows(table.rows())
        sidecar = path.with_name(path.name + ".json")
        meta = dict(table.metadata)
        meta.setdefault("timestamp", run_timestamp())
        meta.setdefault("versions", versions())
        meta["sets"] = [
            {
                "set": r.set_name,
                "mixing_eigenvalues": [float(v) for v in r.mixing_eigenvalues],
                "diagnostics": list(r.diagnostics),
                "permutation_summary": r.permutation_summary,
            }
            for r in table.results
        ]
        with open(sidecar, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from exc
    return sidecar


def read_results(path) -> list[dict]:
    """Parse a results TSV back into dicts with numeric fields as floats."""
    rows = _rows(path)
    header = rows[0]
    out = []
    for row in rows[1:]:
        rec = {}
        for k, v in zip(header, row):
            if k in ("set", "mode", "test_kind"):
                rec[k] = v
            else:
                rec[k] = None if v == "NA" else float(v)
        out.append(rec)
    return out


def read_baseline_mu(path) -> NDArray[np.float64]:
    """Positive baseline means from the last column of a TSV; a non-numeric header is skipped."""
    vals = []
    for k, row in enumerate(_rows(path), start=1):
        try:
            vals.append(float(row[-1]))
        except ValueError:
            if k == 1:
                continue
            raise ValidationError(f"{path}:{k}: non-numeric baseline mean") from None
    arr = np.asarray(vals)
    if arr.size == 0 or np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise ValidationError(f"{path}: baseline means must be positive and finite")
    return arr
