"""Count-matrix ingestion and per-sample normalization factors."""

import csv
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TRIM_M = 0.30
DEFAULT_TRIM_A = 0.05


class DataFormatError(ValueError):
    """Raised when an input file violates the count-matrix format."""


def _geometric_mean(x):
    x = np.asarray(x, dtype=float)
    return float(np.exp(np.mean(np.log(x))))


@dataclass(frozen=True)
class CountMatrix:
    """Dense n x d matrix of nonnegative integer read counts.

    Rows are observations (genes), columns are samples. Row and column
    identifiers must be unique.
    """

    values: np.ndarray
    row_ids: tuple
    col_ids: tuple

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError("counts must be a 2-D matrix")
        if not np.issubdtype(values.dtype, np.integer):
            if not np.all(values == np.floor(values)):
                raise ValueError("counts must be integral")
            values = values.astype(np.int64)
        else:
            values = values.astype(np.int64)
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError("counts must have at least one row and one column")
        if np.any(values < 0):
            i, j = np.argwhere(values < 0)[0]
            raise ValueError(f"negative count at row {i}, column {j}")
        row_ids = tuple(str(r) for r in self.row_ids)
        col_ids = tuple(str(c) for c in self.col_ids)
        if len(row_ids) != values.shape[0]:
            raise ValueError("row_ids length does not match matrix")
        if len(col_ids) != values.shape[1]:
            raise ValueError("col_ids length does not match matrix")
        if len(set(row_ids)) != len(row_ids):
            raise ValueError("duplicate row ids")
        if len(set(col_ids)) != len(col_ids):
            raise ValueError("duplicate column ids")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "col_ids", col_ids)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class NormalizationFactors:
    """Per-sample scale factors s_j, rescaled so their geometric mean is 1."""

    s: np.ndarray
    method: str
    warnings: tuple = field(default_factory=tuple)

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        if s.ndim != 1:
            raise ValueError("factors must be a 1-D vector")
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("factors must be positive and finite")
        if self.method not in ("none", "libsize", "tmm"):
            raise ValueError(f"unknown normalization method {self.method!r}")
        if abs(_geometric_mean(s) - 1.0) > 1e-9:
            raise ValueError("factors must have geometric mean 1")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    @property
    def log_s(self):
        return np.log(self.s)


def unit_factors(d):
    """All-ones factors (no normalization)."""
    return NormalizationFactors(s=np.ones(d), method="none")


def load_counts(path, delimiter=","):
    """Read a delimited count matrix: header row of sample ids, first column gene ids.

    Every data cell must parse as a nonnegative integer; violations are
    reported with the offending gene and sample.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise DataFormatError(f"count file not found: {path}") from None
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataFormatError(f"{path}: header must contain at least one sample id")
        col_ids = [c.strip() for c in header[1:]]
        row_ids = []
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and rec[0].strip() == ""):
                continue  # skip blank lines
            if len(rec) != len(header):
                raise DataFormatError(
                    f"{path}: line {lineno} has {len(rec)} fields, expected {len(header)}"
                )
            gene = rec[0].strip()
            vals = []
            for j, cell in enumerate(rec[1:]):
                cell = cell.strip()
                try:
                    v = int(cell)
                except ValueError:
                    try:
                        float(cell)
                    except ValueError:
                        raise DataFormatError(
                            f"{path}: cell (gene {gene!r}, sample {col_ids[j]!r}) "
                            f"is not a number: {cell!r}"
                        ) from None
                    raise DataFormatError(
                        f"{path}: non-integer count at (gene {gene!r}, sample {col_ids[j]!r}): {cell!r}"
                    ) from None
                if v < 0:
                    raise DataFormatError(
                        f"{path}: negative count at (gene {gene!r}, sample {col_ids[j]!r}): {v}"
                    )
                vals.append(v)
            row_ids.append(gene)
            rows.append(vals)
        if not rows:
            raise DataFormatError(f"{path}: no data rows")
        if len(set(row_ids)) != len(row_ids):
            seen = set()
            dup = next(r for r in row_ids if r in seen or seen.add(r))
            raise DataFormatError(f"{path}: duplicate gene id {dup!r}")
        if len(set(col_ids)) != len(col_ids):
            seen = set()
            dup = next(c for c in col_ids if c in seen or seen.add(c))
            raise DataFormatError(f"{path}: duplicate sample id {dup!r}")
    return CountMatrix(values=np.array(rows, dtype=np.int64), row_ids=tuple(row_ids), col_ids=tuple(col_ids))


def save_counts(counts, path, delimiter=","):
    """Write a CountMatrix in the format accepted by load_counts."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(["gene_id", *counts.col_ids])
        for gene, row in zip(counts.row_ids, counts.values):
            writer.writerow([gene, *[int(v) for v in row]])


def write_factors(factors, col_ids, path):
    """Serialize factors as a two-column CSV (sample_id, s)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "s"])
        for cid, sj in zip(col_ids, factors.s):
            writer.writerow([cid, repr(float(sj))])


def libsize_factors(counts):
    """Library-size factors: column sums scaled to geometric mean 1."""
    colsums = counts.values.sum(axis=0).astype(float)
    if np.any(colsums <= 0):
        j = int(np.argmax(colsums <= 0))
        raise ValueError(f"column {counts.col_ids[j]!r} has zero total count")
    s = colsums / _geometric_mean(colsums)
    return NormalizationFactors(s=s, method="libsize")


def _tmm_column_factor(ref, col, trim_m, trim_a):
    """Trimmed, weighted mean of log2 count ratios of one column against the reference.

    Genes with a zero count in either column are dropped pairwise. Returns
    (factor, ok) where ok is False when no gene survives trimming.
    """
    keep = (ref > 0) & (col > 0)
    if not np.any(keep):
        return 1.0, False
    r = ref[keep].astype(float)
    c = col[keep].astype(float)
    m = np.log2(c) - np.log2(r)
    a = 0.5 * (np.log2(c) + np.log2(r))
    nr = r.sum()
    nc = c.sum()
    # inverse of the delta-method variance of each M value
    w = 1.0 / ((nr - r) / (nr * r) + (nc - c) / (nc * c))
    m_lo, m_hi = np.quantile(m, [trim_m, 1.0 - trim_m])
    a_lo, a_hi = np.quantile(a, [trim_a, 1.0 - trim_a])
    mask = (m >= m_lo) & (m <= m_hi) & (a >= a_lo) & (a <= a_hi)
    if not np.any(mask):
        return 1.0, False
    wm = w[mask]
    return float(2.0 ** (np.sum(wm * m[mask]) / np.sum(wm))), True


def tmm_reference_index(counts):
    """Reference column: 75th-percentile count closest to the mean 75th percentile."""
    q75 = np.quantile(counts.values, 0.75, axis=0)
    return int(np.argmin(np.abs(q75 - q75.mean())))


def tmm_factors(counts, trim_m=DEFAULT_TRIM_M, trim_a=DEFAULT_TRIM_A):
    """Trimmed-mean-of-M-values factors against an automatically chosen reference column.

    The reference is the column whose 75th-percentile count is closest to
    the across-column mean of 75th percentiles. Each column's factor is the
    exponentiated weighted mean of its surviving log2 ratios versus the
    reference; s_j is that factor times the column sum, rescaled to
    geometric mean 1. Columns where no gene survives trimming fall back to
    factor 1 and are reported in `warnings`.
    """
    if counts.d < 2:
        raise ValueError("TMM requires at least 2 columns")
    if not (0 <= trim_m < 0.5) or not (0 <= trim_a < 0.5):
        raise ValueError("trim fractions must lie in [0, 0.5)")
    values = counts.values
    ref_idx = tmm_reference_index(counts)
    ref = values[:, ref_idx]
    factors = np.ones(counts.d)
    warns = []
    for j in range(counts.d):
        f, ok = _tmm_column_factor(ref, values[:, j], trim_m, trim_a)
        factors[j] = f
        if not ok:
            warns.append(f"no genes survived trimming for sample {counts.col_ids[j]!r}; factor set to 1")
    colsums = values.sum(axis=0).astype(float)
    if np.any(colsums <= 0):
        j = int(np.argmax(colsums <= 0))
        raise ValueError(f"column {counts.col_ids[j]!r} has zero total count")
    s = colsums * factors
    s = s / _geometric_mean(s)
    return NormalizationFactors(s=s, method="tmm", warnings=tuple(warns))


def normalization_factors(counts, method):
    """Dispatch on a normalization method name: none | libsize | tmm."""
    if method == "none":
        return unit_factors(counts.d)
    if method == "libsize":
        return libsize_factors(counts)
    if method == "tmm":
        return tmm_factors(counts)
    raise ValueError(f"unknown normalization method {method!r}")
