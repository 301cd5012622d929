"""BSNN1 on-disk container.

Single-matrix record layout::

    BSNN1 kind=<dense|csr|bsr> rows=R cols=C bh=H bw=W nblocks=N dtype=<f32|f64>\\n
    <row_ptr: int64 LE> <col_idx: int64 LE> <values/blocks: f32/f64 LE>

``nblocks`` is the stored block count for bsr, the nonzero count for csr and
0 for dense. Dense records have empty row_ptr/col_idx segments. Round trips
are bit exact for the stored dtype.

A checkpoint is a manifest line followed by named records::

    BSNN1 kind=checkpoint entries=N key=value ...\\n
    name=<param> type=<param|mask>\\n
    <record>
    ...
"""

from __future__ import annotations

import hashlib
from typing import BinaryIO

import numpy as np

from .formats import BlockSparseMatrix, CsrMatrix, as_dense, bsr_to_dense, dense_to_bsr

MAGIC = "BSNN1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_IDX = np.dtype("<i8")


class ContainerError(ValueError):
    """Malformed or truncated BSNN1 data."""


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _header_line(fields: dict) -> bytes:
    body = " ".join(f"{k}={v}" for k, v in fields.items())
    return f"{MAGIC} {body}\n".encode("ascii")


def _parse_line(raw: bytes, expect_magic: bool = True) -> dict:
    if not raw:
        raise ContainerError("unexpected end of file")
    parts = raw.decode("ascii", errors="replace").strip().split()
    if expect_magic:
        if not parts or parts[0] != MAGIC:
            raise ContainerError(f"bad magic, expected {MAGIC!r}")
        parts = parts[1:]
    fields = {}
    for p in parts:
        if "=" not in p:
            raise ContainerError(f"bad header field {p!r}")
        k, _, v = p.partition("=")
        fields[k] = v
    return fields


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated payload: wanted {n} bytes, got {len(buf)}")
    return buf


def _write_array(fh: BinaryIO, a: np.ndarray, dt: np.dtype) -> None:
    fh.write(np.ascontiguousarray(a, dtype=dt).tobytes())


def _read_array(fh: BinaryIO, n: int, dt: np.dtype) -> np.ndarray:
    return np.frombuffer(_read_exact(fh, n * dt.itemsize), dtype=dt).copy()


def write_record(fh: BinaryIO, m, dtype: str = "f64") -> None:
    if dtype not in _DTYPES:
        raise ContainerError(f"unknown dtype {dtype!r}")
    vdt = _DTYPES[dtype]
    if isinstance(m, BlockSparseMatrix):
        fh.write(_header_line({"kind": "bsr", "rows": m.rows, "cols": m.cols,
                               "bh": m.block_h, "bw": m.block_w,
                               "nblocks": m.n_blocks, "dtype": dtype}))
        _write_array(fh, m.row_ptr, _IDX)
        _write_array(fh, m.col_idx, _IDX)
        _write_array(fh, m.blocks, vdt)
    elif isinstance(m, CsrMatrix):
        fh.write(_header_line({"kind": "csr", "rows": m.rows, "cols": m.cols,
                               "bh": 1, "bw": 1, "nblocks": m.nnz, "dtype": dtype}))
        _write_array(fh, m.row_ptr, _IDX)
        _write_array(fh, m.col_idx, _IDX)
        _write_array(fh, m.values, vdt)
    else:
        a = as_dense(m)
        fh.write(_header_line({"kind": "dense", "rows": a.shape[0], "cols": a.shape[1],
                               "bh": 1, "bw": 1, "nblocks": 0, "dtype": dtype}))
        _write_array(fh, a, vdt)


def read_record(fh: BinaryIO):
    """Read one record; returns (matrix, dtype). Values come back as float64."""
    fields = _parse_line(fh.readline())
    try:
        kind = fields["kind"]
        rows, cols = int(fields["rows"]), int(fields["cols"])
        bh, bw = int(fields["bh"]), int(fields["bw"])
        nblocks = int(fields["nblocks"])
        dtype = fields["dtype"]
    except KeyError as e:
        raise ContainerError(f"missing header field {e}") from None
    if dtype not in _DTYPES:
        raise ContainerError(f"unknown dtype {dtype!r}")
    vdt = _DTYPES[dtype]
    if kind == "dense":
        values = _read_array(fh, rows * cols, vdt).astype(np.float64)
        return values.reshape(rows, cols), dtype
    if kind == "csr":
        row_ptr = _read_array(fh, rows + 1, _IDX)
        col_idx = _read_array(fh, nblocks, _IDX)
        values = _read_array(fh, nblocks, vdt).astype(np.float64)
        return CsrMatrix(rows, cols, row_ptr, col_idx, values), dtype
    if kind == "bsr":
        row_ptr = _read_array(fh, rows // bh + 1, _IDX)
        col_idx = _read_array(fh, nblocks, _IDX)
        blocks = _read_array(fh, nblocks * bh * bw, vdt).astype(np.float64)
        return BlockSparseMatrix(rows, cols, bh, bw, row_ptr, col_idx,
                                 blocks.reshape(nblocks, bh, bw)), dtype
    raise ContainerError(f"unknown record kind {kind!r}")


def save_matrix(path, m, dtype: str = "f64") -> None:
    with open(path, "wb") as fh:
        write_record(fh, m, dtype)


def load_matrix(path):
    with open(path, "rb") as fh:
        return read_record(fh)


def save_checkpoint(path, meta: dict, params: dict, masks: dict | None = None,
                    sparse_block: tuple[int, int] | None = None) -> None:
    """Write model parameters and masks under a manifest.

    ``meta`` values must be space-free strings. ``masks`` maps param name to
    a boolean grid; grids are stored as 0/1 dense matrices. When
    ``sparse_block`` is given, 2-D params divisible by it are stored as BSR.
    """
    masks = masks or {}
    entries = [("param", name, arr) for name, arr in params.items()]
    entries += [("mask", name, grid) for name, grid in masks.items()]
    with open(path, "wb") as fh:
        manifest = {"kind": "checkpoint", "entries": len(entries)}
        for k, v in meta.items():
            v = str(v)
            if " " in v or " " in k:
                raise ContainerError(f"meta entries must be space-free: {k}={v!r}")
            manifest[k] = v
        fh.write(_header_line(manifest))
        for etype, name, arr in entries:
            fh.write(f"name={name} type={etype}\n".encode("ascii"))
            if etype == "mask":
                write_record(fh, np.asarray(arr, dtype=np.float64))
                continue
            a = np.asarray(arr, dtype=np.float64)
            if a.ndim == 1:
                a = a.reshape(-1, 1)
            bh_bw_ok = (sparse_block is not None and a.ndim == 2
                        and a.shape[0] % sparse_block[0] == 0
                        and a.shape[1] % sparse_block[1] == 0)
            if bh_bw_ok:
                write_record(fh, dense_to_bsr(a, *sparse_block))
            else:
                write_record(fh, a)


def load_checkpoint(path):
    """Read a checkpoint; returns (meta, params, mask_grids).

    Params come back dense (BSR entries are materialized); 1-D biases were
    stored as single-column matrices and are flattened by the caller, which
    knows the model layout.
    """
    params, masks = {}, {}
    with open(path, "rb") as fh:
        manifest = _parse_line(fh.readline())
        if manifest.get("kind") != "checkpoint":
            raise ContainerError("not a checkpoint file")
        n = int(manifest.pop("entries"))
        manifest.pop("kind")
        for _ in range(n):
            efields = _parse_line(fh.readline(), expect_magic=False)
            if "name" not in efields or "type" not in efields:
                raise ContainerError("malformed entry line")
            m, _ = read_record(fh)
            if isinstance(m, BlockSparseMatrix):
                m = bsr_to_dense(m)
            elif isinstance(m, CsrMatrix):
                raise ContainerError("csr records are not used in checkpoints")
            if efields["type"] == "mask":
                masks[efields["name"]] = m != 0.0
            else:
                params[efields["name"]] = m
    return manifest, params, masks
