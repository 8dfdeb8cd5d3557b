import numpy as np
import pytest

from mplnmix.data_io import (
    CountMatrix,
    DataFormatError,
    _geometric_mean,
    libsize_factors,
    load_counts,
    save_counts,
    tmm_factors,
    tmm_reference_index,
    unit_factors,
    write_factors,
)

from conftest import make_counts


def write(tmp_path, text, name="counts.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadCounts:
    def test_parses_small_matrix(self, tmp_path):
        path = write(tmp_path, "gene,s1,s2\ng1,0,1\ng2,2,3\ng3,4,5\n")
        cm = load_counts(path)
        assert cm.n == 3 and cm.d == 2
        assert np.array_equal(cm.values, [[0, 1], [2, 3], [4, 5]])
        assert cm.row_ids == ("g1", "g2", "g3")
        assert cm.col_ids == ("s1", "s2")

    def test_negative_cell_reports_location(self, tmp_path):
        path = write(tmp_path, "gene,s1,s2\ng1,0,1\ng2,-1,3\n")
        with pytest.raises(DataFormatError, match="negative count.*g2.*s1"):
            load_counts(path)

    def test_non_integer_cell(self, tmp_path):
        path = write(tmp_path, "gene,s1,s2\ng1,0,2.5\n")
        with pytest.raises(DataFormatError, match="non-integer count"):
            load_counts(path)

    def test_non_numeric_cell(self, tmp_path):
        path = write(tmp_path, "gene,s1,s2\ng1,0,abc\n")
        with pytest.raises(DataFormatError, match="not a number"):
            load_counts(path)

    def test_ragged_row(self, tmp_path):
        path = write(tmp_path, "gene,s1,s2\ng1,0\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_counts(path)

    def test_duplicate_gene_id(self, tmp_path):
        path = write(tmp_path, "gene,s1\ng1,0\ng1,2\n")
        with pytest.raises(DataFormatError, match="duplicate gene id"):
            load_counts(path)

    def test_duplicate_sample_id(self, tmp_path):
        path = write(tmp_path, "gene,s1,s1\ng1,0,1\n")
        with pytest.raises(DataFormatError, match="duplicate sample id"):
            load_counts(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError, match="not found"):
            load_counts(tmp_path / "nope.csv")

    def test_tsv(self, tmp_path):
        path = write(tmp_path, "gene\ts1\ts2\ng1\t7\t8\n", name="counts.tsv")
        cm = load_counts(path, delimiter="\t")
        assert cm.values.tolist() == [[7, 8]]

    def test_round_trip(self, tmp_path, rng):
        values = rng.integers(0, 1000, size=(20, 4))
        cm = make_counts(values)
        path = tmp_path / "rt.csv"
        save_counts(cm, path)
        back = load_counts(path)
        assert np.array_equal(back.values, cm.values)
        assert back.row_ids == cm.row_ids
        assert back.col_ids == cm.col_ids


class TestCountMatrix:
    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="negative"):
            make_counts([[1, -2]])

    def test_rejects_fractional(self):
        with pytest.raises(ValueError, match="integral"):
            CountMatrix(values=np.array([[1.5, 2.0]]), row_ids=("a",), col_ids=("x", "y"))

    def test_accepts_integral_floats(self):
        cm = CountMatrix(values=np.array([[1.0, 2.0]]), row_ids=("a",), col_ids=("x", "y"))
        assert cm.values.dtype == np.int64

    def test_large_counts(self):
        cm = make_counts([[483_965, 0]])
        assert cm.values.max() == 483_965


class TestLibsize:
    def test_identical_columns(self):
        cm = make_counts([[5, 5], [7, 7]])
        nf = libsize_factors(cm)
        assert np.allclose(nf.s, 1.0)
        assert nf.method == "libsize"

    def test_hand_case(self):
        # column sums 100 and 400, geometric mean 200
        cm = make_counts([[40, 160], [60, 240]])
        nf = libsize_factors(cm)
        assert np.allclose(nf.s, [0.5, 2.0], rtol=1e-12)

    def test_single_column(self):
        nf = libsize_factors(make_counts([[3], [9]]))
        assert np.allclose(nf.s, [1.0])

    def test_zero_column_rejected(self):
        with pytest.raises(ValueError, match="zero total"):
            libsize_factors(make_counts([[0, 1], [0, 2]]))

    def test_common_scaling_invariance(self, rng):
        values = rng.integers(1, 50, size=(30, 3))
        a = libsize_factors(make_counts(values)).s
        b = libsize_factors(make_counts(values * 7)).s
        assert np.allclose(a, b, rtol=1e-12)

    def test_geometric_mean_one(self, rng):
        values = rng.integers(0, 100, size=(25, 5)) + np.arange(5)
        nf = libsize_factors(make_counts(values))
        assert abs(_geometric_mean(nf.s) - 1.0) < 1e-9


class TestTMM:
    def test_identical_columns(self, rng):
        col = rng.integers(1, 500, size=40)
        cm = make_counts(np.column_stack([col, col, col]))
        nf = tmm_factors(cm)
        assert np.allclose(nf.s, 1.0, rtol=1e-12)
        assert nf.method == "tmm"

    def test_doubled_column(self, rng):
        col = rng.integers(1, 500, size=60)
        cm = make_counts(np.column_stack([col, 2 * col]))
        nf = tmm_factors(cm)
        # factor ratio 2, column-sum ratio 2, so s ratio 4
        assert nf.s[1] / nf.s[0] == pytest.approx(4.0, rel=1e-9)

    def test_proportional_columns_exact_with_zero_trim(self, rng):
        col = rng.integers(1, 300, size=50)
        cm = make_counts(np.column_stack([col, 3 * col]))
        nf = tmm_factors(cm, trim_m=0.0, trim_a=0.0)
        assert nf.s[1] / nf.s[0] == pytest.approx(9.0, rel=1e-9)

    def test_reference_selection(self):
        # constant columns have 75th percentiles (10, 50, 90); mean is 50
        values = np.column_stack([np.full(30, 10), np.full(30, 50), np.full(30, 90)])
        assert tmm_reference_index(make_counts(values)) == 1

    def test_zero_counts_excluded_pairwise(self):
        # second gene is unusable in column 2 only; factor still computable
        cm = make_counts([[10, 20], [5, 0], [8, 16], [3, 6]])
        nf = tmm_factors(cm, trim_m=0.0, trim_a=0.0)
        assert np.all(nf.s > 0)

    def test_no_survivors_falls_back(self):
        # disjoint supports: no gene is nonzero in both columns
        cm = make_counts([[1, 0], [0, 1], [2, 0], [0, 2]])
        nf = tmm_factors(cm)
        assert len(nf.warnings) > 0
        assert np.all(nf.s > 0)

    def test_requires_two_columns(self):
        with pytest.raises(ValueError, match="2 columns"):
            tmm_factors(make_counts([[1], [2]]))

    def test_geometric_mean_one(self, rng):
        values = rng.integers(0, 800, size=(100, 4)) + 1
        nf = tmm_factors(make_counts(values))
        assert abs(_geometric_mean(nf.s) - 1.0) < 1e-9


def test_factors_csv_round_trip(tmp_path, rng):
    values = rng.integers(1, 100, size=(10, 3))
    cm = make_counts(values)
    nf = libsize_factors(cm)
    path = tmp_path / "factors.csv"
    write_factors(nf, cm.col_ids, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "sample_id,s"
    back = {row.split(",")[0]: float(row.split(",")[1]) for row in lines[1:]}
    for cid, sj in zip(cm.col_ids, nf.s):
        assert back[cid] == sj


def test_unit_factors():
    nf = unit_factors(4)
    assert nf.method == "none"
    assert np.all(nf.s == 1.0)
    assert np.allclose(nf.log_s, 0.0)
