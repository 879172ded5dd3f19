import subprocess
import sys
import time

import numpy as np
import pytest

from vcgsa import cli
from vcgsa.io import read_results, write_counts_tsv, write_meta_tsv

from conftest import make_counts, make_design


@pytest.fixture
def dataset(tmp_path):
    design = make_design(n=12, n_i=3, q=1, seed=8)
    counts = make_counts(design, P=80, seed=8)
    write_counts_tsv(counts, tmp_path / "counts.tsv")
    write_meta_tsv(design.to_meta(), tmp_path / "meta.tsv", ["x"])
    lines = [f"SET{k}\tset {k}\t" + "\t".join(f"g{j}" for j in range(3 * k, 3 * k + 4)) for k in range(9)]
    (tmp_path / "sets.gmt").write_text("\n".join(lines) + "\n")
    (tmp_path / "one.gmt").write_text("ONE\tsingle\tg5\n")
    return tmp_path


def run(args):
    return cli.main([str(a) for a in args])


def base(d, gmt="sets.gmt", out="res.tsv"):
    return ["test", "--counts", d / "counts.tsv", "--meta", d / "meta.tsv", "--gmt", d / gmt, "--out", d / out]


def test_nine_sets(dataset, capsys):
    assert run(base(dataset)) == 0
    rows = read_results(dataset / "res.tsv")
    assert len(rows) == 9
    assert all(0 <= r["p_raw"] <= 1 and r["p_adjusted"] >= r["p_raw"] for r in rows)
    assert "9 sets tested" in capsys.readouterr().out


def test_both_columns(dataset):
    assert run(base(dataset) + ["--test", "both", "--permutations", "100"]) == 0
    rows = read_results(dataset / "res.tsv")
    assert all(r["p_asymptotic"] is not None and r["p_permutation"] is not None for r in rows)
    assert all(r["B"] == 100 for r in rows)


def test_homo_equals_hetero_for_one_gene(dataset):
    extra = ["--min-set-size", "1"]
    assert run(base(dataset, "one.gmt", "hetero.tsv") + extra + ["--mode", "hetero"]) == 0
    assert run(base(dataset, "one.gmt", "homo.tsv") + extra + ["--mode", "homo"]) == 0
    a, b = read_results(dataset / "hetero.tsv")[0], read_results(dataset / "homo.tsv")[0]
    for key in ("statistic", "df_proxy", "p_raw"):
        assert a[key] == b[key]


def test_threads_do_not_change_output(dataset, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    opts = ["--test", "permutation", "--permutations", "100", "--seed", "5"]
    assert run(base(dataset, out="t1.tsv") + opts + ["--threads", "1"]) == 0
    assert run(base(dataset, out="t4.tsv") + opts + ["--threads", "4"]) == 0
    assert (dataset / "t1.tsv").read_bytes() == (dataset / "t4.tsv").read_bytes()


def test_bandwidth_conflicts_with_identity(dataset):
    with pytest.raises(SystemExit) as exc:
        run(base(dataset) + ["--weights", "identity", "--bandwidth", "0.5"])
    assert exc.value.code == 2


def test_unknown_flag_is_error(dataset):
    with pytest.raises(SystemExit) as exc:
        run(base(dataset) + ["--frobnicate"])
    assert exc.value.code == 2


def test_validation_error_exit_code(dataset):
    meta = (dataset / "meta.tsv").read_text().splitlines()
    (dataset / "meta.tsv").write_text("\n".join(meta[:-1]) + "\n")
    assert run(base(dataset)) == 2


def test_numeric_failure_exit_code(tmp_path):
    design = make_design(n=4, n_i=2)
    counts = make_counts(design, P=2)
    write_counts_tsv(counts, tmp_path / "counts.tsv")
    write_meta_tsv(design.to_meta(), tmp_path / "meta.tsv", ["x"])
    (tmp_path / "sets.gmt").write_text("S\td\tg0\tg1\n")
    assert run(base(tmp_path) + ["--weights", "voom"]) == 3


def test_small_n_advisory(dataset, capsys):
    run(base(dataset))
    assert "advisory" in capsys.readouterr().err


def test_config_file_and_override(dataset):
    (dataset / "cfg.toml").write_text('weights = "identity"\ntest = "both"\npermutations = 50\n')
    assert run(base(dataset, out="c.tsv") + ["--config", dataset / "cfg.toml"]) == 0
    rows = read_results(dataset / "c.tsv")
    assert rows[0]["B"] == 50
    assert run(base(dataset, out="c2.tsv") + ["--config", dataset / "cfg.toml", "--permutations", "120"]) == 0
    assert read_results(dataset / "c2.tsv")[0]["B"] == 120
    (dataset / "bad.toml").write_text("nonsense = 1\n")
    assert run(base(dataset) + ["--config", dataset / "bad.toml"]) == 2


def test_help_documents_flags():
    parser = cli.build_parser()
    for name in ("test", "simulate", "inspect"):
        sub = parser._subparsers._group_actions[0].choices[name]
        for action in sub._actions:
            assert action.help, f"{name} --{action.dest} has no help text"


def test_simulate_grid_rows_and_determinism(tmp_path):
    args = ["simulate", "--regime", "misspecified", "--replicates", "2", "--n", "20", "--genes", "100",
            "--set-size", "5", "--seed", "3"]
    assert run(args + ["--out", tmp_path / "a.csv"]) == 0
    assert run(args + ["--out", tmp_path / "b.csv", "--threads", "2"]) == 0
    text = (tmp_path / "a.csv").read_text()
    assert len(text.splitlines()) == 1 + 7
    assert text == (tmp_path / "b.csv").read_text()


def test_simulate_smoke_timing(tmp_path):
    t0 = time.perf_counter()
    assert run(["simulate", "--regime", "misspecified", "--replicates", "10", "--n", "50", "--genes", "100",
                "--beta-grid", "0", "--out", tmp_path / "s.csv"]) == 0
    assert time.perf_counter() - t0 < 10


def test_inspect(dataset):
    out = dataset / "inspect"
    assert run(["inspect", "--counts", dataset / "counts.tsv", "--meta", dataset / "meta.tsv", "--out-dir", out]) == 0
    for name in ("logcpm.tsv", "weights.tsv", "meanvar.tsv", "library_sizes.tsv"):
        assert (out / name).exists()
    assert len((out / "meanvar.tsv").read_text().splitlines()) == 81


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "vcgsa.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
