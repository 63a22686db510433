"""Sparse 0-1 routing matrices with labelled block partitions.

Entries are kept as a row-major sorted coordinate list.  Every interconnection
matrix in a well-posed model has exactly one entry per row, so the only
arithmetic needed is the boolean product with a routing left factor, the
disjoint sum, and block slicing / concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SparseBinaryMatrix",
    "BlockPartition",
    "SparseMatrixError",
    "RoutingError",
    "OverlapError",
    "mul",
    "add_disjoint",
    "block_diag",
    "extract_block",
    "assemble_blocks",
    "permute",
    "render_grid",
]


class SparseMatrixError(ValueError):
    """Shape or index error in a sparse 0-1 operation."""


class RoutingError(SparseMatrixError):
    """A left factor has a row with more than one entry."""


class OverlapError(SparseMatrixError):
    """Two summands share an entry, i.e. one input is driven twice."""


def _frozen(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.int64)
    a.setflags(write=False)
    return a


class SparseBinaryMatrix:
    """Immutable 0-1 matrix stored as sorted (row, col) coordinates."""

    __slots__ = ("nrows", "ncols", "rows", "cols")

    def __init__(self, nrows: int, ncols: int, rows=(), cols=(), *, _trusted=False):
        nrows, ncols = int(nrows), int(ncols)
        if nrows < 0 or ncols < 0:
            raise SparseMatrixError(f"negative shape ({nrows}, {ncols})")
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        if rows.shape != cols.shape:
            raise SparseMatrixError("row and column index lists differ in length")
        if not _trusted and rows.size:
            if rows.min() < 0 or rows.max() >= nrows or cols.min() < 0 or cols.max() >= ncols:
                raise SparseMatrixError(f"index out of range for shape ({nrows}, {ncols})")
            order = np.lexsort((cols, rows))
            rows, cols = rows[order], cols[order]
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if dup.any():
                i = int(np.argmax(dup))
                raise SparseMatrixError(f"duplicate entry ({rows[i]}, {cols[i]})")
        object.__setattr__(self, "nrows", nrows)
        object.__setattr__(self, "ncols", ncols)
        object.__setattr__(self, "rows", _frozen(rows))
        object.__setattr__(self, "cols", _frozen(cols))

    def __setattr__(self, name, value):
        raise AttributeError("SparseBinaryMatrix is immutable")

    # constructors ---------------------------------------------------------

    @classmethod
    def zeros(cls, nrows: int, ncols: int) -> SparseBinaryMatrix:
        return cls(nrows, ncols)

    @classmethod
    def identity(cls, n: int) -> SparseBinaryMatrix:
        idx = np.arange(n)
        return cls(n, n, idx, idx, _trusted=True)

    @classmethod
    def from_entries(cls, nrows: int, ncols: int, entries: Iterable[tuple[int, int]]) -> SparseBinaryMatrix:
        entries = list(entries)
        if not entries:
            return cls(nrows, ncols)
        r, c = zip(*entries)
        return cls(nrows, ncols, r, c)

    @classmethod
    def from_dense(cls, a) -> SparseBinaryMatrix:
        a = np.asarray(a)
        if a.ndim != 2:
            raise SparseMatrixError("expected a 2-D array")
        if not np.isin(a, (0, 1)).all():
            raise SparseMatrixError("dense input is not 0-1")
        r, c = np.nonzero(a)
        return cls(a.shape[0], a.shape[1], r, c, _trusted=True)

    # views -----------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    @property
    def entries(self) -> frozenset[tuple[int, int]]:
        return frozenset(zip(self.rows.tolist(), self.cols.tolist()))

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.nrows)

    def is_routing(self) -> bool:
        """True when no row carries more than one entry."""
        return bool(self.nnz == 0 or (self.row_counts() <= 1).all())

    def source_of(self) -> np.ndarray:
        """Column index feeding each row, or -1 for an empty row.

        Only meaningful for routing matrices.
        """
        out = np.full(self.nrows, -1, dtype=np.int64)
        out[self.rows] = self.cols
        return out

    def toarray(self, dtype=np.int8) -> np.ndarray:
        a = np.zeros(self.shape, dtype=dtype)
        a[self.rows, self.cols] = 1
        return a

    def transpose(self) -> SparseBinaryMatrix:
        return SparseBinaryMatrix(self.ncols, self.nrows, self.cols, self.rows)

    T = property(transpose)

    def __eq__(self, other):
        if not isinstance(other, SparseBinaryMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
        )

    def __hash__(self):
        return hash((self.shape, self.rows.tobytes(), self.cols.tobytes()))

    def __repr__(self):
        if self.nrows * self.ncols <= 64:
            body = "; ".join(" ".join(str(v) for v in row) for row in self.toarray())
            return f"SparseBinaryMatrix({self.nrows}x{self.ncols}: [{body}])"
        return f"SparseBinaryMatrix({self.nrows}x{self.ncols}, nnz={self.nnz})"

    def __matmul__(self, other):
        return mul(self, other)

    def __add__(self, other):
        return add_disjoint(self, other)


@dataclass(frozen=True)
class BlockPartition:
    """Row and column block sizes with a role tag per block.

    Row tags and column tags are separate because the two sides of an
    interconnection matrix carry different signals (e.g. rows ``g, d, s, o``
    against columns ``g, d, s, i``).
    """

    row_block_sizes: tuple[int, ...]
    col_block_sizes: tuple[int, ...]
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]

    def __post_init__(self):
        for name in ("row_block_sizes", "col_block_sizes", "row_labels", "col_labels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.row_block_sizes) != len(self.row_labels):
            raise SparseMatrixError("one label per row block required")
        if len(self.col_block_sizes) != len(self.col_labels):
            raise SparseMatrixError("one label per column block required")
        if len(set(self.row_labels)) != len(self.row_labels) or len(set(self.col_labels)) != len(self.col_labels):
            raise SparseMatrixError("partition labels must be unique")
        if any(s < 0 for s in self.row_block_sizes + self.col_block_sizes):
            raise SparseMatrixError("negative block size")

    @property
    def nrows(self) -> int:
        return sum(self.row_block_sizes)

    @property
    def ncols(self) -> int:
        return sum(self.col_block_sizes)

    def row_range(self, label: str) -> range:
        return self._range(label, self.row_labels, self.row_block_sizes)

    def col_range(self, label: str) -> range:
        return self._range(label, self.col_labels, self.col_block_sizes)

    @staticmethod
    def _range(label, labels, sizes) -> range:
        try:
            k = labels.index(label)
        except ValueError:
            raise SparseMatrixError(f"unknown block label {label!r}; have {labels}") from None
        start = sum(sizes[:k])
        return range(start, start + sizes[k])

    def check(self, m: SparseBinaryMatrix) -> None:
        if m.shape != (self.nrows, self.ncols):
            raise SparseMatrixError(f"partition {self.nrows}x{self.ncols} does not fit matrix {m.nrows}x{m.ncols}")


# operations ----------------------------------------------------------------


def _row_pointer(m: SparseBinaryMatrix) -> np.ndarray:
    return np.searchsorted(m.rows, np.arange(m.nrows + 1))


def mul(a: SparseBinaryMatrix, b: SparseBinaryMatrix) -> SparseBinaryMatrix:
    """Boolean product ``a @ b`` where ``a`` is a routing matrix.

    Raises
    ------
    SparseMatrixError
        On an inner-dimension mismatch.
    RoutingError
        If a row of ``a`` has two or more entries.
    """
    if a.ncols != b.nrows:
        raise SparseMatrixError(f"cannot multiply {a.nrows}x{a.ncols} by {b.nrows}x{b.ncols}")
    if not a.is_routing():
        bad = int(np.argmax(a.row_counts() > 1))
        raise RoutingError(f"left factor row {bad} has more than one entry")
    if a.nnz == 0 or b.nnz == 0:
        return SparseBinaryMatrix(a.nrows, b.ncols)
    ptr = _row_pointer(b)
    starts = ptr[a.cols]
    counts = ptr[a.cols + 1] - starts
    total = int(counts.sum())
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    idx = np.repeat(starts, counts) + offsets
    # rows of ``a`` are sorted and each row picks one sorted row of ``b``
    return SparseBinaryMatrix(a.nrows, b.ncols, np.repeat(a.rows, counts), b.cols[idx], _trusted=True)


def add_disjoint(a: SparseBinaryMatrix, b: SparseBinaryMatrix) -> SparseBinaryMatrix:
    """Union of two entry sets that must not overlap."""
    if a.shape != b.shape:
        raise SparseMatrixError(f"shape mismatch {a.shape} vs {b.shape}")
    if b.nnz == 0:
        return a
    if a.nnz == 0:
        return b
    key_a = a.rows * a.ncols + a.cols
    key_b = b.rows * b.ncols + b.cols
    common = np.intersect1d(key_a, key_b)
    if common.size:
        r, c = divmod(int(common[0]), a.ncols)
        raise OverlapError(f"entry ({r}, {c}) present in both summands; an input is driven twice")
    keys = np.sort(np.concatenate([key_a, key_b]))
    return SparseBinaryMatrix(a.nrows, a.ncols, keys // a.ncols, keys % a.ncols, _trusted=True)


def block_diag(ms: Sequence[SparseBinaryMatrix]) -> SparseBinaryMatrix:
    nrows = sum(m.nrows for m in ms)
    ncols = sum(m.ncols for m in ms)
    if not ms:
        return SparseBinaryMatrix(0, 0)
    r_off = np.cumsum([0] + [m.nrows for m in ms[:-1]])
    c_off = np.cumsum([0] + [m.ncols for m in ms[:-1]])
    rows = np.concatenate([m.rows + ro for m, ro in zip(ms, r_off)])
    cols = np.concatenate([m.cols + co for m, co in zip(ms, c_off)])
    return SparseBinaryMatrix(nrows, ncols, rows, cols, _trusted=True)


def _slice(m: SparseBinaryMatrix, rr: range, cr: range) -> SparseBinaryMatrix:
    lo, hi = np.searchsorted(m.rows, [rr.start, rr.stop])
    rows, cols = m.rows[lo:hi], m.cols[lo:hi]
    keep = (cols >= cr.start) & (cols < cr.stop)
    return SparseBinaryMatrix(len(rr), len(cr), rows[keep] - rr.start, cols[keep] - cr.start, _trusted=True)


def extract_block(m: SparseBinaryMatrix, p: BlockPartition, row_label: str, col_label: str) -> SparseBinaryMatrix:
    """Sub-matrix at block ``(row_label, col_label)``, reindexed from zero."""
    p.check(m)
    return _slice(m, p.row_range(row_label), p.col_range(col_label))


def assemble_blocks(grid: Sequence[Sequence[SparseBinaryMatrix]]) -> SparseBinaryMatrix:
    """Concatenate a 2-D grid of blocks into one matrix.

    Every block in a grid row must share a height and every block in a grid
    column a width.
    """
    if not grid:
        return SparseBinaryMatrix(0, 0)
    ncb = len(grid[0])
    if any(len(row) != ncb for row in grid):
        raise SparseMatrixError("ragged grid: grid rows have different block counts")
    heights = [row[0].nrows if ncb else 0 for row in grid]
    widths = [grid[0][j].ncols for j in range(ncb)]
    for i, row in enumerate(grid):
        for j, blk in enumerate(row):
            if blk.nrows != heights[i] or blk.ncols != widths[j]:
                raise SparseMatrixError(
                    f"ragged grid: block ({i}, {j}) is {blk.nrows}x{blk.ncols}, expected {heights[i]}x{widths[j]}"
                )
    r_off = np.cumsum([0] + heights)
    c_off = np.cumsum([0] + widths)
    rows, cols = [np.empty(0, np.int64)], [np.empty(0, np.int64)]
    for i, row in enumerate(grid):
        # row-major order inside each grid row needs a merge across blocks
        rr = [blk.rows + r_off[i] for blk in row]
        cc = [blk.cols + c_off[j] for j, blk in enumerate(row)]
        if rr:
            rcat, ccat = np.concatenate(rr), np.concatenate(cc)
            order = np.lexsort((ccat, rcat))
            rows.append(rcat[order])
            cols.append(ccat[order])
    return SparseBinaryMatrix(int(r_off[-1]), int(c_off[-1]), np.concatenate(rows), np.concatenate(cols), _trusted=True)


def _check_perm(perm, n: int, what: str) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64).ravel()
    if perm.size != n or not np.array_equal(np.sort(perm), np.arange(n)):
        raise SparseMatrixError(f"{what} is not a permutation of range({n})")
    return perm


def permute(m: SparseBinaryMatrix, row_perm, col_perm) -> SparseBinaryMatrix:
    """Reorder rows and columns with fancy-index semantics.

    Row ``i`` of the result is row ``row_perm[i]`` of ``m`` and likewise for
    columns, matching ``dense[row_perm][:, col_perm]``.
    """
    rp = _check_perm(row_perm, m.nrows, "row_perm")
    cp = _check_perm(col_perm, m.ncols, "col_perm")
    rinv = np.empty_like(rp)
    rinv[rp] = np.arange(rp.size)
    cinv = np.empty_like(cp)
    cinv[cp] = np.arange(cp.size)
    return SparseBinaryMatrix(m.nrows, m.ncols, rinv[m.rows], cinv[m.cols])


def render_grid(m: SparseBinaryMatrix, p: BlockPartition | None = None) -> str:
    """Dense 0/1 text rendering with partition rules."""
    dense = m.toarray()
    col_cuts = set(np.cumsum(p.col_block_sizes)[:-1].tolist()) if p else set()
    row_cuts = set(np.cumsum(p.row_block_sizes)[:-1].tolist()) if p else set()

    def fmt(row) -> str:
        out = []
        for j, v in enumerate(row):
            if j in col_cuts:
                out.append("|")
            out.append(str(int(v)))
        if m.ncols in col_cuts:
            out.append("|")
        return " ".join(out)

    width = len(fmt(np.zeros(m.ncols)))
    lines = []
    for i, row in enumerate(dense):
        if i in row_cuts:
            lines.append("-" * width)
        lines.append(fmt(row))
    return "\n".join(lines)
