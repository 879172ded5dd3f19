"""Command line interface: ``vcgsa test | simulate | inspect``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import simulate as sim
from .analysis import Analysis
from .data_model import NumericalError, TimeBasis, ValidationError, validate_dataset
from .io import (
    ResultsTable,
    fmt,
    read_baseline_mu,
    read_counts_tsv,
    read_gmt,
    read_meta_tsv,
    run_timestamp,
    versions,
    write_results,
)
from .normalize import log_cpm
from .permutation import check_permutation_count

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("vcgsa")

KERNELS = {"gauss": "gaussian", "epa": "epanechnikov"}
ADVISORY_N = 30


def _bandwidth(value: str) -> float | None:
    if value == "auto":
        return None
    try:
        h = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("bandwidth must be 'auto' or a positive number") from None
    if not h > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return h


def _grid(value: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {value!r}") from None


def _positive_int(value: str) -> int:
    k = int(value)
    if k < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return k


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file of option = value pairs; command line flags win")
    p.add_argument("--weights", choices=["gene", "obs", "voom", "identity"], default="gene",
                   help="precision weight strategy (default: gene)")
    p.add_argument("--kernel", choices=sorted(KERNELS), default="gauss",
                   help="smoothing kernel for gene/obs weights (default: gauss)")
    p.add_argument("--bandwidth", type=_bandwidth, default=None,
                   help="'auto' (cross-validated, default) or a fixed bandwidth")
    p.add_argument("--basis", default="linear", help="time basis: linear, poly:D or spline:M (default: linear)")
    p.add_argument("--threads", type=_positive_int, default=1, help="worker threads (default: 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vcgsa", description="Variance component gene set tests for longitudinal RNA-seq."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="test gene sets on a count matrix")
    t.add_argument("--counts", required=True, help="counts TSV (genes x samples)")
    t.add_argument("--meta", required=True, help="sample TSV: sample_id, subject_id, time, covariates")
    t.add_argument("--gmt", required=True, help="gene sets in GMT format")
    t.add_argument("--out", required=True, help="results TSV; metadata goes to <out>.json")
    _add_common(t)
    t.add_argument("--mode", choices=["hetero", "homo"], default="hetero",
                   help="gene-specific (hetero, default) or shared (homo) time effects")
    t.add_argument("--test", choices=["asymptotic", "permutation", "both"], default="asymptotic",
                   help="p-value type (default: asymptotic)")
    t.add_argument("--permutations", type=_positive_int, default=1000, help="permutations B (default: 1000)")
    t.add_argument("--seed", type=int, default=0, help="permutation seed (default: 0)")
    t.add_argument("--alpha", type=float, default=0.05, help="significance level for the summary (default: 0.05)")
    t.add_argument("--pperm-add-one", action="store_true", help="use (1 + count) / (1 + B) permutation p-values")
    t.add_argument("--centering", choices=["null", "full"], default="null",
                   help="residuals from the null model (default) or the full unweighted model")
    t.add_argument("--min-set-size", type=_positive_int, default=2,
                   help="skip sets with fewer matched genes (default: 2)")
    t.add_argument("--recompute-weights", action="store_true",
                   help="refit precision weights on every permuted dataset")

    s = sub.add_parser("simulate", help="Monte Carlo rejection rates for a synthetic regime")
    s.add_argument("--regime", choices=["misspecified", "negbin", "poisson_gamma"], required=True,
                   help="data-generating regime")
    s.add_argument("--beta-grid", type=_grid, default=None,
                   help="comma-separated effect sizes (sigma_gamma with --heterogeneous)")
    s.add_argument("--replicates", type=_positive_int, default=None, help="Monte Carlo replicates per grid value")
    s.add_argument("--out", required=True, help="output CSV")
    s.add_argument("--baseline-mu", help="TSV of empirical baseline means (poisson_gamma)")
    s.add_argument("--heterogeneous", action="store_true", help="gene-specific slopes (poisson_gamma)")
    s.add_argument("--counts", action="store_true", help="integer output (misspecified)")
    s.add_argument("--n", type=_positive_int, help="subjects")
    s.add_argument("--n-i", type=_positive_int, help="time points per subject")
    s.add_argument("--genes", type=_positive_int, help="total genes P")
    s.add_argument("--set-size", type=_positive_int, help="genes in the tested set p")
    s.add_argument("--mode", choices=["hetero", "homo"], default="hetero", help="test mode (default: hetero)")
    s.add_argument("--test", choices=["asymptotic", "permutation", "both"], default=None,
                   help="p-value type (default: both for poisson_gamma, else asymptotic)")
    s.add_argument("--permutations", type=_positive_int, default=200, help="permutations per test (default: 200)")
    s.add_argument("--seed", type=int, default=1, help="study seed (default: 1)")
    s.add_argument("--alpha", type=float, default=0.05, help="test level (default: 0.05)")
    _add_common(s)

    i = sub.add_parser("inspect", help="dump normalized values, weights and the mean-variance curve")
    i.add_argument("--counts", required=True, help="counts TSV (genes x samples)")
    i.add_argument("--meta", required=True, help="sample TSV: sample_id, subject_id, time, covariates")
    i.add_argument("--out-dir", required=True, help="directory for the dumped tables")
    _add_common(i)
    return parser


def _load_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"config {path}: {exc}") from exc
    return {k.replace("-", "_"): v for k, v in raw.items()}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _load_config(args.config)
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(cfg) - known - {"config"})
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        conv = {}
        for a in sp._actions:
            if a.dest in cfg:
                v = cfg[a.dest]
                if a.type is not None and not isinstance(v, bool):
                    try:
                        v = a.type(",".join(map(str, v)) if isinstance(v, list) else str(v))
                    except (argparse.ArgumentTypeError, ValueError) as exc:
                        raise ValidationError(f"config {a.dest}: {exc}") from None
                if a.choices is not None and v not in a.choices:
                    raise ValidationError(f"config {a.dest}: {v!r} not in {sorted(a.choices)}")
                conv[a.dest] = v
        sp.set_defaults(**conv)
        args = parser.parse_args(argv)
    if args.bandwidth is not None and args.weights in ("identity", "voom"):
        parser.error("--bandwidth only applies to --weights gene or obs")
    return args


def _basis(spec: str, times) -> TimeBasis:
    return TimeBasis.parse(spec, times)


def cmd_test(args) -> int:
    counts = read_counts_tsv(args.counts)
    meta, cov_names = read_meta_tsv(args.meta)
    design, counts = validate_dataset(counts, meta, cov_names)
    sets, report = read_gmt(args.gmt, counts.gene_ids, args.min_set_size)
    for r in report:
        if r.unmatched:
            logger.info("set %s: %d unmatched ids", r.name, len(r.unmatched))
    if design.n < ADVISORY_N and args.test == "asymptotic":
        print(
            f"advisory: only {design.n} subjects; the asymptotic test can be conservative, "
            "consider --test permutation",
            file=sys.stderr,
        )
    basis = _basis(args.basis, design.times)
    analysis = Analysis.from_counts(counts, design, basis, args.weights, KERNELS[args.kernel], args.bandwidth)

    if args.test != "asymptotic":
        check_permutation_count(args.permutations, args.alpha)

    def one(gs):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return _test_one(gs)

    def _test_one(gs):
        return analysis.test(
            gs,
            mode=args.mode,
            test=args.test,
            n_permutations=args.permutations,
            seed=args.seed,
            centering=args.centering,
            add_one=args.pperm_add_one,
            recompute_weights=args.recompute_weights,
            alpha=args.alpha,
        )

    with ThreadPoolExecutor(args.threads) as pool:
        results = list(pool.map(one, sets))
    table = ResultsTable(
        results,
        metadata={
            "command": "test",
            "options": _options(args),
            "n_subjects": design.n,
            "n_samples": design.n_obs,
            "n_genes": counts.shape[0],
            "bandwidth": analysis.bandwidth,
            "gmt": [
                {"set": r.name, "requested": r.requested, "matched": r.matched,
                 "unmatched": list(r.unmatched), "skipped": r.skipped}
                for r in report
            ],
            "timestamp": run_timestamp(),
            "versions": versions(),
        },
    )
    write_results(table, args.out)
    adj = table.adjusted_p
    n_sig = int(np.sum(table.p_raw <= args.alpha))
    n_adj = int(np.sum(adj <= args.alpha))
    print(f"{len(results)} sets tested; {n_sig} significant at alpha={args.alpha:g} ({n_adj} after BH)")
    return 0


def _options(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose", "threads")}


def cmd_simulate(args) -> int:
    kw = {}
    for flag, key in (("n", "n"), ("n_i", "n_i"), ("genes", "P"), ("set_size", "p"),
                      ("replicates", "replicates"), ("beta_grid", "grid"), ("test", "test")):
        v = getattr(args, flag)
        if v is not None:
            kw[key] = v
    if args.baseline_mu:
        kw["baseline_mu"] = tuple(read_baseline_mu(args.baseline_mu))
    mode = "heterogeneous" if args.mode == "hetero" else "homogeneous"
    cfg = sim.default_config(
        args.regime,
        heterogeneous=args.heterogeneous,
        counts_output=args.counts,
        weights=(args.weights,),
        mode=mode,
        permutations=args.permutations,
        seed=args.seed,
        alpha=args.alpha,
        **kw,
    )
    rows = sim.run_study(cfg, workers=args.threads)
    Path(args.out).write_text(sim.study_csv(rows))
    print(f"{len(rows)} rows written to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    counts = read_counts_tsv(args.counts)
    meta, cov_names = read_meta_tsv(args.meta)
    design, counts = validate_dataset(counts, meta, cov_names)
    basis = _basis(args.basis, design.times)
    analysis = Analysis.from_counts(counts, design, basis, args.weights, KERNELS[args.kernel], args.bandwidth)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    norm = log_cpm(counts)
    _write_matrix(out / "logcpm.tsv", counts.gene_ids, design.sample_ids, norm.y)
    _write_matrix(out / "weights.tsv", counts.gene_ids, design.sample_ids, analysis.weights)
    with open(out / "library_sizes.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", "library_size"])
        w.writerows([s, fmt(v)] for s, v in zip(design.sample_ids, norm.library_sizes))
    mv = analysis.mean_variance
    if mv is not None:
        with open(out / "meanvar.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["mean", "variance", "smoothed"])
            fitted = mv(mv.m)
            w.writerows([fmt(a), fmt(b), fmt(c)] for a, b, c in zip(mv.m, mv.v, fitted))
        print(f"bandwidth {fmt(mv.bandwidth)} ({mv.kernel} kernel)")
    print(f"wrote {counts.shape[0]} genes x {design.n_obs} samples to {out}")
    return 0


def _write_matrix(path, rows, cols, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["gene_id", *cols])
        for name, row in zip(rows, values):
            w.writerow([name, *(fmt(v) for v in row)])


COMMANDS = {"test": cmd_test, "simulate": cmd_simulate, "inspect": cmd_inspect}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
