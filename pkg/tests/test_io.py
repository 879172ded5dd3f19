import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vcgsa.data_model import CountMatrix, TestResult, ValidationError, validate_dataset
from vcgsa.io import (
    RESULT_COLUMNS,
    ResultsTable,
    bh_adjust,
    fmt,
    read_baseline_mu,
    read_counts_tsv,
    read_gmt,
    read_meta_tsv,
    read_results,
    write_counts_tsv,
    write_meta_tsv,
    write_results,
)

from conftest import make_counts, make_design

GENES = ["g1", "g2", "g3", "g4"]


def _gmt(tmp_path, text):
    path = tmp_path / "sets.gmt"
    path.write_text(text)
    return path


def test_gmt_basic(tmp_path):
    sets, report = read_gmt(_gmt(tmp_path, "SETA\tdesc\tg1\tg2\n"), GENES)
    assert len(sets) == 1 and sets[0].p == 2 and sets[0].gene_indices == (0, 1)
    assert report[0].unmatched == ()


def test_gmt_all_missing_skipped(tmp_path):
    with pytest.warns(UserWarning, match="skipped"):
        sets, report = read_gmt(_gmt(tmp_path, "S\td\tx1\tx2\nT\td\tg1\tg3\n"), GENES)
    assert [s.name for s in sets] == ["T"]
    assert report[0].skipped and report[0].unmatched == ("x1", "x2")


def test_gmt_duplicates_and_case(tmp_path):
    with pytest.warns(UserWarning, match="duplicate"):
        sets, _ = read_gmt(_gmt(tmp_path, "S\td\tg1\tg1\tg2\tG3\n"), GENES)
    assert sets[0].gene_indices == (0, 1)


def test_gmt_malformed(tmp_path):
    with pytest.raises(ValidationError, match="malformed"):
        read_gmt(_gmt(tmp_path, "S\tonly\n"), GENES)


def test_gmt_min_size_one(tmp_path):
    sets, _ = read_gmt(_gmt(tmp_path, "S\td\tg1\n"), GENES, min_size=1)
    assert sets[0].p == 1


def test_bh_examples():
    np.testing.assert_allclose(bh_adjust([0.01, 0.02, 0.03]), [0.03, 0.03, 0.03])
    np.testing.assert_allclose(bh_adjust([0.2]), [0.2])
    np.testing.assert_allclose(bh_adjust([1.0, 1.0]), [1.0, 1.0])
    np.testing.assert_allclose(bh_adjust([0.04, 0.01, 0.03, 0.5]), [0.0533333333, 0.04, 0.0533333333, 0.5])
    with pytest.raises(ValidationError):
        bh_adjust([0.5, 1.2])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_bh_properties(p):
    p = np.array(p)
    adj = bh_adjust(p)
    assert np.all(adj >= p - 1e-15) and np.all(adj <= 1.0)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= -1e-15)


def _result(name, stat, p, kind="asymptotic"):
    return TestResult(name, stat, np.array([0.5, 0.25]), p if kind != "permutation" else None,
                      p if kind == "permutation" else None, 200 if kind == "permutation" else None,
                      "heterogeneous", n_genes=3, seed=7 if kind == "permutation" else None)


def test_results_round_trip(tmp_path):
    table = ResultsTable([_result("A", 12.3456789012345, 1.23456789e-7), _result("B", 0.5, 0.4, "permutation")])
    path = tmp_path / "res.tsv"
    sidecar = write_results(table, path)
    header = path.read_text().splitlines()[0].split("\t")
    assert tuple(header) == RESULT_COLUMNS
    rows = read_results(path)
    assert rows[0]["statistic"] == float(fmt(12.3456789012345))
    assert rows[0]["p_raw"] == pytest.approx(1.23456789e-7, rel=1e-9)
    assert "e-07" in path.read_text()
    assert rows[1]["B"] == 200 and rows[1]["p_asymptotic"] is None
    assert rows[0]["df_proxy"] == 0.75
    meta = json.loads(sidecar.read_text())
    assert meta["sets"][0]["mixing_eigenvalues"] == [0.5, 0.25]


def test_empty_table_header_only(tmp_path):
    path = tmp_path / "empty.tsv"
    write_results(ResultsTable([]), path)
    assert path.read_text() == "\t".join(RESULT_COLUMNS) + "\n"


def test_results_byte_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    table = ResultsTable([_result("A", 2.0, 0.01)])
    write_results(table, tmp_path / "a.tsv")
    write_results(table, tmp_path / "b.tsv")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    assert (tmp_path / "a.tsv.json").read_bytes() == (tmp_path / "b.tsv.json").read_bytes()
    assert json.loads((tmp_path / "a.tsv.json").read_text())["timestamp"] == "1970-01-01T00:00:00Z"


def test_unwritable_path(tmp_path):
    with pytest.raises(ValidationError):
        write_results(ResultsTable([]), tmp_path / "missing" / "x.tsv")


def test_counts_and_meta_round_trip(tmp_path):
    design = make_design(n=4, n_i=2, q=2)
    counts = make_counts(design, P=5)
    write_counts_tsv(counts, tmp_path / "c.tsv")
    write_meta_tsv(design.to_meta(), tmp_path / "m.tsv", ["age", "sex"])
    c2 = read_counts_tsv(tmp_path / "c.tsv")
    meta, names = read_meta_tsv(tmp_path / "m.tsv")
    assert names == ("age", "sex")
    np.testing.assert_array_equal(c2.counts, counts.counts)
    d2, _ = validate_dataset(c2, meta, names)
    assert d2 == design or np.array_equal(d2.covariates, design.covariates)


def test_bad_inputs(tmp_path):
    (tmp_path / "c.tsv").write_text("gene\ts1\ts2\ng1\t1\t2.5\n")
    with pytest.raises(ValidationError, match="integers"):
        read_counts_tsv(tmp_path / "c.tsv")
    (tmp_path / "m.tsv").write_text("sample_id\tsubject_id\ttime\tx\ns1\ti\tnoon\t1\n")
    with pytest.raises(ValidationError, match="non-numeric time"):
        read_meta_tsv(tmp_path / "m.tsv")
    (tmp_path / "m2.tsv").write_text("sample_id\tsubject_id\ttime\tx\ns1\ti\t1\t\n")
    with pytest.raises(ValidationError, match="covariate"):
        read_meta_tsv(tmp_path / "m2.tsv")
    with pytest.raises(ValidationError):
        read_counts_tsv(tmp_path / "nope.tsv")


def test_baseline_reader(tmp_path):
    (tmp_path / "mu.tsv").write_text("gene\tmu\ng1\t3.5\ng2\t100\n")
    np.testing.assert_array_equal(read_baseline_mu(tmp_path / "mu.tsv"), [3.5, 100.0])
    (tmp_path / "bad.tsv").write_text("mu\n-1\n")
    with pytest.raises(ValidationError):
        read_baseline_mu(tmp_path / "bad.tsv")
