"""Hot numeric kernels: sparse-times-dense multiplies and the recurrent
sequence recursions used by BPTT.

Two interchangeable backends:

* ``numba`` -- @njit loop kernels, used by default when numba imports.
* ``numpy`` -- vectorized fallback, also selectable by setting the
  environment variable ``BLOCKRNN_NUMBA=0``.

Kernels are serial and walk (block) rows or timesteps in a fixed order, so
a result never depends on thread or worker count. Inputs are read-only.
"""

from __future__ import annotations

import os

import numpy as np

from .formats import BlockSparseMatrix, CsrMatrix, ShapeError, as_dense

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

ENV_FLAG = "BLOCKRNN_NUMBA"
BACKENDS = ("numba", "numpy")


def numba_available() -> bool:
    return _HAVE_NUMBA


def active_backend() -> str:
    """Backend used when none is passed explicitly."""
    flag = os.environ.get(ENV_FLAG, "1").strip().lower()
    if flag in ("0", "false", "off", "no") or not _HAVE_NUMBA:
        return "numpy"
    return "numba"


def _resolve(backend: str | None) -> str:
    if backend is None:
        return active_backend()
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}, expected one of {BACKENDS}")
    if backend == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend


if _HAVE_NUMBA:

    @njit(cache=True)
    def _bsr_mm_nb(row_ptr, col_idx, blocks, bh, bw, b, out):
        n_out = b.shape[1]
        for br in range(row_ptr.size - 1):
            r0 = br * bh
            for k in range(row_ptr[br], row_ptr[br + 1]):
                c0 = col_idx[k] * bw
                for i in range(bh):
                    for j in range(bw):
                        v = blocks[k, i, j]
                        if v != 0.0:
                            for c in range(n_out):
                                out[r0 + i, c] += v * b[c0 + j, c]

    @njit(cache=True)
    def _csr_mm_nb(row_ptr, col_idx, values, b, out):
        n_out = b.shape[1]
        for r in range(row_ptr.size - 1):
            for k in range(row_ptr[r], row_ptr[r + 1]):
                v = values[k]
                j = col_idx[k]
                for c in range(n_out):
                    out[r, c] += v * b[j, c]

    @njit(cache=True)
    def _dense_mm_nb(a, b, out):
        for i in range(a.shape[0]):
            for k in range(a.shape[1]):
                v = a[i, k]
                if v != 0.0:
                    for c in range(b.shape[1]):
                        out[i, c] += v * b[k, c]

    @njit(cache=True)
    def _rnn_seq_fwd_nb(P, wh, b, h0):
        T, H, B = P.shape
        Hs = np.empty((T, H, B))
        h = h0.copy()
        for t in range(T):
            g = np.dot(wh, h)
            for i in range(H):
                for j in range(B):
                    v = np.tanh(P[t, i, j] + g[i, j] + b[i])
                    Hs[t, i, j] = v
                    h[i, j] = v
        return Hs

    @njit(cache=True)
    def _rnn_seq_bwd_nb(dH, Hs, whT):
        T, H, B = dH.shape
        dP = np.empty((T, H, B))
        dh = np.zeros((H, B))
        for t in range(T - 1, -1, -1):
            for i in range(H):
                for j in range(B):
                    s = Hs[t, i, j]
                    dP[t, i, j] = (dH[t, i, j] + dh[i, j]) * (1.0 - s * s)
            dh = np.dot(whT, dP[t])
        return dP, dh

    @njit(cache=True)
    def _gru_seq_fwd_nb(P, uzr, uc, bz, br, bc, h0):
        T, H3, B = P.shape
        H = H3 // 3
        Z = np.empty((T, H, B))
        R = np.empty((T, H, B))
        C = np.empty((T, H, B))
        RH = np.empty((T, H, B))
        Hs = np.empty((T, H, B))
        h = h0.copy()
        rh = np.empty((H, B))
        for t in range(T):
            g = np.dot(uzr, h)
            for i in range(H):
                for j in range(B):
                    z = 0.5 * (1.0 + np.tanh(0.5 * (P[t, i, j] + g[i, j] + bz[i])))
                    r = 0.5 * (1.0 + np.tanh(0.5 * (P[t, H + i, j] + g[H + i, j] + br[i])))
                    Z[t, i, j] = z
                    R[t, i, j] = r
                    v = r * h[i, j]
                    RH[t, i, j] = v
                    rh[i, j] = v
            cp = np.dot(uc, rh)
            for i in range(H):
                for j in range(B):
                    c = np.tanh(P[t, 2 * H + i, j] + cp[i, j] + bc[i])
                    C[t, i, j] = c
                    v = (1.0 - Z[t, i, j]) * h[i, j] + Z[t, i, j] * c
                    Hs[t, i, j] = v
                    h[i, j] = v
        return Z, R, C, RH, Hs

    @njit(cache=True)
    def _gru_seq_bwd_nb(dH, Z, R, C, Hs, h0, uzrT, ucT):
        T, H, B = dH.shape
        dAz = np.empty((T, H, B))
        dAr = np.empty((T, H, B))
        dAc = np.empty((T, H, B))
        dh = np.zeros((H, B))
        dzr = np.empty((2 * H, B))
        for t in range(T - 1, -1, -1):
            hp = Hs[t - 1] if t > 0 else h0
            for i in range(H):
                for j in range(B):
                    z = Z[t, i, j]
                    c = C[t, i, j]
                    d = dH[t, i, j] + dh[i, j]
                    dAc[t, i, j] = d * z * (1.0 - c * c)
                    dAz[t, i, j] = d * (c - hp[i, j]) * z * (1.0 - z)
                    dh[i, j] = d * (1.0 - z)
            drh = np.dot(ucT, dAc[t])
            for i in range(H):
                for j in range(B):
                    r = R[t, i, j]
                    dar = drh[i, j] * hp[i, j] * r * (1.0 - r)
                    dAr[t, i, j] = dar
                    dh[i, j] += drh[i, j] * r
                    dzr[i, j] = dAz[t, i, j]
                    dzr[H + i, j] = dar
            dh += np.dot(uzrT, dzr)
        return dAz, dAr, dAc, dh


def _bsr_mm_np(a: BlockSparseMatrix, b: np.ndarray, out: np.ndarray) -> None:
    bh, bw = a.block_h, a.block_w
    for br in range(a.row_ptr.size - 1):
        s, e = a.row_ptr[br], a.row_ptr[br + 1]
        if s == e:
            continue
        panel = out[br * bh:(br + 1) * bh]
        for k in range(s, e):
            c0 = a.col_idx[k] * bw
            panel += a.blocks[k] @ b[c0:c0 + bw]


def _csr_mm_np(a: CsrMatrix, b: np.ndarray, out: np.ndarray) -> None:
    for r in range(a.rows):
        s, e = a.row_ptr[r], a.row_ptr[r + 1]
        if s == e:
            continue
        out[r] = a.values[s:e] @ b[a.col_idx[s:e]]


def bsr_matmul(a: BlockSparseMatrix, b, backend: str | None = None) -> np.ndarray:
    """BSR times dense. Matches the dense product within 1e-6 relative."""
    b = as_dense(b)
    if a.cols != b.shape[0]:
        raise ShapeError(f"a.cols={a.cols} != b.rows={b.shape[0]}")
    out = np.zeros((a.rows, b.shape[1]))
    if _resolve(backend) == "numba":
        _bsr_mm_nb(a.row_ptr, a.col_idx, a.blocks, a.block_h, a.block_w, b, out)
    else:
        _bsr_mm_np(a, b, out)
    return out


def csr_matmul(a: CsrMatrix, b, backend: str | None = None) -> np.ndarray:
    """CSR times dense, same contract as `bsr_matmul`."""
    b = as_dense(b)
    if a.cols != b.shape[0]:
        raise ShapeError(f"a.cols={a.cols} != b.rows={b.shape[0]}")
    out = np.zeros((a.rows, b.shape[1]))
    if _resolve(backend) == "numba":
        _csr_mm_nb(a.row_ptr, a.col_idx, a.values, b, out)
    else:
        _csr_mm_np(a, b, out)
    return out


def dense_matmul(a, b, backend: str | None = None) -> np.ndarray:
    """Dense reference multiply (BLAS on the numpy backend, loops under numba)."""
    a = as_dense(a)
    b = as_dense(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"a.cols={a.shape[1]} != b.rows={b.shape[0]}")
    if _resolve(backend) == "numba":
        out = np.zeros((a.shape[0], b.shape[1]))
        _dense_mm_nb(a, b, out)
        return out
    return a @ b


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _rnn_seq_fwd_np(P, wh, b, h0):
    T, H, B = P.shape
    Hs = np.empty((T, H, B))
    h = h0
    bcol = b[:, None]
    for t in range(T):
        h = np.tanh(P[t] + wh @ h + bcol)
        Hs[t] = h
    return Hs


def _rnn_seq_bwd_np(dH, Hs, whT):
    T, H, B = dH.shape
    dP = np.empty((T, H, B))
    dh = np.zeros((H, B))
    for t in range(T - 1, -1, -1):
        dP[t] = (dH[t] + dh) * (1.0 - Hs[t] * Hs[t])
        dh = whT @ dP[t]
    return dP, dh


def _gru_seq_fwd_np(P, uzr, uc, bz, br, bc, h0):
    T, H3, B = P.shape
    H = H3 // 3
    Z, R, C, RH, Hs = (np.empty((T, H, B)) for _ in range(5))
    h = h0
    bzc, brc, bcc = bz[:, None], br[:, None], bc[:, None]
    for t in range(T):
        g = uzr @ h
        z = _sigmoid(P[t, :H] + g[:H] + bzc)
        r = _sigmoid(P[t, H:2 * H] + g[H:] + brc)
        rh = r * h
        c = np.tanh(P[t, 2 * H:] + uc @ rh + bcc)
        h = (1.0 - z) * h + z * c
        Z[t], R[t], C[t], RH[t], Hs[t] = z, r, c, rh, h
    return Z, R, C, RH, Hs


def _gru_seq_bwd_np(dH, Z, R, C, Hs, h0, uzrT, ucT):
    T, H, B = dH.shape
    dAz, dAr, dAc = (np.empty((T, H, B)) for _ in range(3))
    dh = np.zeros((H, B))
    for t in range(T - 1, -1, -1):
        hp = Hs[t - 1] if t > 0 else h0
        z, r, c = Z[t], R[t], C[t]
        d = dH[t] + dh
        dAc[t] = d * z * (1.0 - c * c)
        dAz[t] = d * (c - hp) * z * (1.0 - z)
        drh = ucT @ dAc[t]
        dAr[t] = drh * hp * r * (1.0 - r)
        dh = (d * (1.0 - z) + drh * r
              + uzrT @ np.concatenate([dAz[t], dAr[t]], axis=0))
    return dAz, dAr, dAc, dh


def rnn_seq_forward(P, wh, b, h0, backend: str | None = None):
    """Hidden-state recursion h_t = tanh(P_t + wh h_{t-1} + b) over a window."""
    if _resolve(backend) == "numba":
        return _rnn_seq_fwd_nb(P, wh, b, h0)
    return _rnn_seq_fwd_np(P, wh, b, h0)


def rnn_seq_backward(dH, Hs, whT, backend: str | None = None):
    """Reverse recursion; returns (pre-activation deltas, d h0)."""
    if _resolve(backend) == "numba":
        return _rnn_seq_bwd_nb(dH, Hs, whT)
    return _rnn_seq_bwd_np(dH, Hs, whT)


def gru_seq_forward(P, uzr, uc, bz, br, bc, h0, backend: str | None = None):
    """GRU recursion over a window given stacked input projections P.

    P rows are the z, r, candidate pre-activation contributions in that
    order; returns the per-step gate values, candidate, r*h and states.
    """
    if _resolve(backend) == "numba":
        return _gru_seq_fwd_nb(P, uzr, uc, bz, br, bc, h0)
    return _gru_seq_fwd_np(P, uzr, uc, bz, br, bc, h0)


def gru_seq_backward(dH, Z, R, C, Hs, h0, uzrT, ucT, backend: str | None = None):
    """Reverse GRU recursion; returns per-gate pre-activation deltas and d h0."""
    if _resolve(backend) == "numba":
        return _gru_seq_bwd_nb(dH, Z, R, C, Hs, h0, uzrT, ucT)
    return _gru_seq_bwd_np(dH, Z, R, C, Hs, h0, uzrT, ucT)
