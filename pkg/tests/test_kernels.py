"""Multiply kernels against an independent triple-loop oracle, both backends."""

import numpy as np
import pytest
from numba import njit

from blockrnn.formats import ShapeError, dense_to_bsr, dense_to_csr
from blockrnn.kernels import (active_backend, bsr_matmul, csr_matmul,
                              dense_matmul, gru_seq_backward, gru_seq_forward,
                              numba_available, rnn_seq_backward, rnn_seq_forward)

BACKENDS = ["numpy"] + (["numba"] if numba_available() else [])


@njit(cache=True)
def triple_loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for k in range(a.shape[1]):
            for j in range(b.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def triple_loop_python(a, b):
    out = [[0.0] * b.shape[1] for _ in range(a.shape[0])]
    for i in range(a.shape[0]):
        for k in range(a.shape[1]):
            for j in range(b.shape[1]):
                out[i][j] += a[i, k] * b[k, j]
    return np.array(out)


def test_oracle_agrees_with_plain_python_loops():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.allclose(triple_loop_matmul(a, b), triple_loop_python(a, b),
                       rtol=1e-12, atol=1e-12)


def masked_matrix(rng, rows, cols, bh, bw, dead_frac):
    a = rng.uniform(-1, 1, size=(rows, cols))
    dead = rng.random((rows // bh, cols // bw)) < dead_frac
    return np.where(np.repeat(np.repeat(~dead, bh, 0), bw, 1), a, 0.0)


@pytest.mark.parametrize("backend", BACKENDS)
class TestBsrMatmul:
    def test_block_diagonal_identity_passes_through(self, backend):
        m = dense_to_bsr(np.eye(8), 4, 4)
        b = np.random.default_rng(1).normal(size=(8, 3))
        assert np.array_equal(bsr_matmul(m, b, backend=backend), b)

    def test_empty_bsr_gives_zero(self, backend):
        m = dense_to_bsr(np.zeros((8, 8)), 2, 2)
        b = np.ones((8, 5))
        assert np.array_equal(bsr_matmul(m, b, backend=backend), np.zeros((8, 5)))

    def test_random_against_triple_loop_oracle(self, backend):
        rng = np.random.default_rng(2)
        a = masked_matrix(rng, 16, 16, 4, 4, 0.75)
        b = rng.normal(size=(16, 8))
        got = bsr_matmul(dense_to_bsr(a, 4, 4), b, backend=backend)
        want = triple_loop_matmul(a, b)
        scale = max(np.abs(want).max(), 1e-30)
        assert np.abs(got - want).max() / scale < 1e-6

    def test_shape_mismatch(self, backend):
        m = dense_to_bsr(np.eye(4), 2, 2)
        with pytest.raises(ShapeError):
            bsr_matmul(m, np.ones((5, 2)), backend=backend)


@pytest.mark.parametrize("backend", BACKENDS)
class TestCsrMatmul:
    def test_identity(self, backend):
        b = np.random.default_rng(3).normal(size=(6, 4))
        assert np.array_equal(csr_matmul(dense_to_csr(np.eye(6)), b,
                                         backend=backend), b)

    def test_empty(self, backend):
        out = csr_matmul(dense_to_csr(np.zeros((3, 7))), np.ones((7, 2)),
                         backend=backend)
        assert np.array_equal(out, np.zeros((3, 2)))

    def test_random_against_triple_loop_oracle(self, backend):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(20, 12))
        a[rng.random(a.shape) < 0.8] = 0.0
        b = rng.normal(size=(12, 9))
        got = csr_matmul(dense_to_csr(a), b, backend=backend)
        want = triple_loop_matmul(a, b)
        scale = max(np.abs(want).max(), 1e-30)
        assert np.abs(got - want).max() / scale < 1e-6


@pytest.mark.parametrize("backend", BACKENDS)
def test_kernels_agree_across_block_shapes(backend):
    rng = np.random.default_rng(5)
    for bh, bw in [(1, 1), (4, 4), (12, 2), (8, 8), (16, 16), (32, 32)]:
        rows = bh * int(rng.integers(1, max(2, 64 // bh) + 1))
        cols = bw * int(rng.integers(1, max(2, 64 // bw) + 1))
        a = masked_matrix(rng, rows, cols, bh, bw, 0.6)
        b = rng.normal(size=(cols, int(rng.integers(1, 9))))
        want = triple_loop_matmul(a, b)
        scale = max(np.abs(want).max(), 1e-30)
        for got in (bsr_matmul(dense_to_bsr(a, bh, bw), b, backend=backend),
                    csr_matmul(dense_to_csr(a), b, backend=backend),
                    dense_matmul(a, b, backend=backend)):
            assert np.abs(got - want).max() / scale < 1e-6


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("BLOCKRNN_NUMBA", "0")
    assert active_backend() == "numpy"
    monkeypatch.setenv("BLOCKRNN_NUMBA", "1")
    assert active_backend() == ("numba" if numba_available() else "numpy")


def test_numba_backend_errors_when_disabled_not_requested(monkeypatch):
    # an explicit backend argument overrides the env flag
    monkeypatch.setenv("BLOCKRNN_NUMBA", "0")
    m = dense_to_bsr(np.eye(4), 2, 2)
    out = bsr_matmul(m, np.ones((4, 2)), backend="numba" if numba_available() else None)
    assert out.shape == (4, 2)


class TestSequenceKernels:
    """The BPTT recursions must agree across backends to fp noise."""

    def setup_method(self):
        rng = np.random.default_rng(8)
        self.T, self.H, self.B = 5, 6, 3
        self.P3 = rng.normal(size=(self.T, 3 * self.H, self.B))
        self.P1 = rng.normal(size=(self.T, self.H, self.B))
        self.uzr = rng.normal(size=(2 * self.H, self.H)) * 0.3
        self.uc = rng.normal(size=(self.H, self.H)) * 0.3
        self.wh = rng.normal(size=(self.H, self.H)) * 0.3
        self.b = rng.normal(size=self.H) * 0.1
        self.h0 = rng.normal(size=(self.H, self.B)) * 0.5
        self.dH = rng.normal(size=(self.T, self.H, self.B))

    @pytest.mark.skipif(not numba_available(), reason="numba missing")
    def test_rnn_forward_backend_parity(self):
        a = rnn_seq_forward(self.P1, self.wh, self.b, self.h0, backend="numpy")
        b = rnn_seq_forward(self.P1, self.wh, self.b, self.h0, backend="numba")
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)

    @pytest.mark.skipif(not numba_available(), reason="numba missing")
    def test_rnn_backward_backend_parity(self):
        Hs = rnn_seq_forward(self.P1, self.wh, self.b, self.h0, backend="numpy")
        whT = np.ascontiguousarray(self.wh.T)
        a = rnn_seq_backward(self.dH, Hs, whT, backend="numpy")
        b = rnn_seq_backward(self.dH, Hs, whT, backend="numba")
        np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-14)
        np.testing.assert_allclose(a[1], b[1], rtol=0, atol=1e-14)

    @pytest.mark.skipif(not numba_available(), reason="numba missing")
    def test_gru_backend_parity(self):
        args = (self.P3, self.uzr, self.uc, self.b, self.b, self.b, self.h0)
        outs_np = gru_seq_forward(*args, backend="numpy")
        outs_nb = gru_seq_forward(*args, backend="numba")
        for x, y in zip(outs_np, outs_nb):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-14)
        Z, R, C, RH, Hs = outs_np
        uzrT = np.ascontiguousarray(self.uzr.T)
        ucT = np.ascontiguousarray(self.uc.T)
        back_np = gru_seq_backward(self.dH, Z, R, C, Hs, self.h0, uzrT, ucT,
                                   backend="numpy")
        back_nb = gru_seq_backward(self.dH, Z, R, C, Hs, self.h0, uzrT, ucT,
                                   backend="numba")
        for x, y in zip(back_np, back_nb):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-13)
