"""Dense, CSR, and block-sparse (BSR) matrix formats.

Conversions are exact: "nonzero" always means a bitwise comparison against
0.0, never a magnitude threshold. All value arrays are float64; a float32
mode exists only in the on-disk container (see `container`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Matrix dimensions violate an operation's contract."""


def as_dense(m) -> np.ndarray:
    """Coerce ``m`` to a 2-D, C-contiguous float64 array."""
    a = np.ascontiguousarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    return a


def check_divisible(rows: int, cols: int, block_h: int, block_w: int) -> None:
    """Raise ShapeError naming the offending dimension if blocks don't tile."""
    if block_h < 1 or block_w < 1:
        raise ShapeError(f"block dims must be >= 1, got {block_h}x{block_w}")
    if rows % block_h != 0:
        raise ShapeError(f"rows={rows} not divisible by block_h={block_h}")
    if cols % block_w != 0:
        raise ShapeError(f"cols={cols} not divisible by block_w={block_w}")


def _tiles(a: np.ndarray, block_h: int, block_w: int) -> np.ndarray:
    """View of ``a`` as a (grid_h, grid_w, block_h, block_w) tile array."""
    gh, gw = a.shape[0] // block_h, a.shape[1] // block_w
    return a.reshape(gh, block_h, gw, block_w).swapaxes(1, 2)


@dataclass(frozen=True)
class BlockSparseMatrix:
    """BSR storage: block-row extents, block-column indices, contiguous blocks.

    ``blocks`` has shape (n_stored, block_h, block_w) and is C-contiguous, so
    the stored blocks are laid out back to back in memory.
    """

    rows: int
    cols: int
    block_h: int
    block_w: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    blocks: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", np.ascontiguousarray(self.row_ptr, dtype=np.int64))
        object.__setattr__(self, "col_idx", np.ascontiguousarray(self.col_idx, dtype=np.int64))
        object.__setattr__(self, "blocks", np.ascontiguousarray(self.blocks, dtype=np.float64))
        self.validate()

    @property
    def n_blocks(self) -> int:
        return int(self.col_idx.size)

    def validate(self) -> None:
        check_divisible(self.rows, self.cols, self.block_h, self.block_w)
        gh, gw = self.rows // self.block_h, self.cols // self.block_w
        rp = self.row_ptr
        if rp.shape != (gh + 1,) or rp[0] != 0 or rp[-1] != self.col_idx.size:
            raise ShapeError("row_ptr does not match block grid / stored block count")
        if np.any(np.diff(rp) < 0):
            raise ShapeError("row_ptr must be non-decreasing")
        if self.blocks.shape != (self.col_idx.size, self.block_h, self.block_w):
            raise ShapeError("blocks array does not match stored block count and block dims")
        if self.col_idx.size:
            if self.col_idx.min() < 0 or self.col_idx.max() >= gw:
                raise ShapeError("block column index out of range")
            for br in range(gh):
                seg = self.col_idx[rp[br]:rp[br + 1]]
                if seg.size > 1 and np.any(np.diff(seg) <= 0):
                    raise ShapeError(f"col_idx not strictly increasing in block row {br}")


@dataclass(frozen=True)
class CsrMatrix:
    """Compressed sparse row storage: per-row extents plus per-nonzero columns."""

    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", np.ascontiguousarray(self.row_ptr, dtype=np.int64))
        object.__setattr__(self, "col_idx", np.ascontiguousarray(self.col_idx, dtype=np.int64))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float64))
        self.validate()

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ShapeError("CSR matrix must have positive dims")
        rp = self.row_ptr
        if rp.shape != (self.rows + 1,) or rp[0] != 0 or rp[-1] != self.col_idx.size:
            raise ShapeError("row_ptr does not match rows / nonzero count")
        if np.any(np.diff(rp) < 0):
            raise ShapeError("row_ptr must be non-decreasing")
        if self.values.shape != self.col_idx.shape:
            raise ShapeError("values and col_idx must have equal length")
        if self.col_idx.size:
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.cols:
                raise ShapeError("column index out of range")
            for r in range(self.rows):
                seg = self.col_idx[rp[r]:rp[r + 1]]
                if seg.size > 1 and np.any(np.diff(seg) <= 0):
                    raise ShapeError(f"col_idx not strictly increasing in row {r}")


def dense_to_bsr(m, block_h: int, block_w: int) -> BlockSparseMatrix:
    """Store exactly the blocks of ``m`` that contain at least one nonzero."""
    a = as_dense(m)
    rows, cols = a.shape
    check_divisible(rows, cols, block_h, block_w)
    tiles = _tiles(a, block_h, block_w)
    keep = (tiles != 0.0).any(axis=(2, 3))
    gh = rows // block_h
    row_ptr = np.zeros(gh + 1, dtype=np.int64)
    np.cumsum(keep.sum(axis=1), out=row_ptr[1:])
    br, bc = np.nonzero(keep)  # row-major: col indices increase within each row
    blocks = np.ascontiguousarray(tiles[br, bc], dtype=np.float64)
    return BlockSparseMatrix(rows, cols, block_h, block_w, row_ptr, bc, blocks)


def bsr_to_dense(m: BlockSparseMatrix) -> np.ndarray:
    """Materialize a BSR matrix; omitted blocks become exact zeros."""
    gh, gw = m.rows // m.block_h, m.cols // m.block_w
    tiles = np.zeros((gh, gw, m.block_h, m.block_w))
    br = np.repeat(np.arange(gh), np.diff(m.row_ptr))
    tiles[br, m.col_idx] = m.blocks
    return np.ascontiguousarray(tiles.swapaxes(1, 2).reshape(m.rows, m.cols))


def dense_to_csr(m) -> CsrMatrix:
    a = as_dense(m)
    ri, ci = np.nonzero(a)
    row_ptr = np.zeros(a.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(ri, minlength=a.shape[0]), out=row_ptr[1:])
    return CsrMatrix(a.shape[0], a.shape[1], row_ptr, ci, a[ri, ci])


def csr_to_dense(m: CsrMatrix) -> np.ndarray:
    out = np.zeros((m.rows, m.cols))
    ri = np.repeat(np.arange(m.rows), np.diff(m.row_ptr))
    out[ri, m.col_idx] = m.values
    return out


def sparsity(m) -> float:
    """Fraction of entries that are exactly zero."""
    a = as_dense(m)
    return float(np.count_nonzero(a == 0.0)) / a.size


def block_sparsity(m, block_h: int, block_w: int) -> float:
    """Fraction of blocks that are entirely zero."""
    a = as_dense(m)
    check_divisible(a.shape[0], a.shape[1], block_h, block_w)
    tiles = _tiles(a, block_h, block_w)
    dead = ~(tiles != 0.0).any(axis=(2, 3))
    return float(np.count_nonzero(dead)) / dead.size


@dataclass(frozen=True)
class OverheadReport:
    """Index-storage cost of a sparse format relative to its value storage."""

    value_bits: int
    index_bits: int
    block_h: int
    block_w: int
    indices_per_nonzero_unit: int
    overhead_ratio: float


def indexing_overhead(value_bits: int, index_bits: int, block_h: int, block_w: int,
                      indices_per_nonzero_unit: int = 2) -> OverheadReport:
    """Index bits per stored unit divided by value bits per block.

    With one index pair per block, growing the block area shrinks the ratio
    proportionally: a 1x1 block at 16-bit values and indices costs 200%,
    4x4 costs 12.5%, 16x16 costs under 1%.
    """
    for name, v in (("value_bits", value_bits), ("index_bits", index_bits),
                    ("block_h", block_h), ("block_w", block_w),
                    ("indices_per_nonzero_unit", indices_per_nonzero_unit)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    ratio = (indices_per_nonzero_unit * index_bits) / (value_bits * block_h * block_w)
    return OverheadReport(value_bits, index_bits, block_h, block_w,
                          indices_per_nonzero_unit, ratio)
