"""Format conversions, sparsity measures, and the indexing-overhead model."""

import numpy as np
import pytest

from blockrnn.formats import (BlockSparseMatrix, ShapeError, block_sparsity,
                              bsr_to_dense, csr_to_dense, dense_to_bsr,
                              dense_to_csr, indexing_overhead, sparsity)


def scan_nonzero_blocks(a, bh, bw):
    """Independent oracle: direct scan of every block for any nonzero."""
    found = []
    for i in range(0, a.shape[0], bh):
        for j in range(0, a.shape[1], bw):
            if np.any(a[i:i + bh, j:j + bw] != 0.0):
                found.append((i // bh, j // bw))
    return found


class TestDenseToBsr:
    def test_all_zero_matrix_stores_nothing(self):
        m = dense_to_bsr(np.zeros((4, 4)), 2, 2)
        assert m.n_blocks == 0
        assert np.array_equal(bsr_to_dense(m), np.zeros((4, 4)))

    def test_identity_is_block_diagonal(self):
        m = dense_to_bsr(np.eye(4), 2, 2)
        assert m.n_blocks == 2
        assert list(m.col_idx) == [0, 1]
        for blk in m.blocks:
            assert np.array_equal(blk, np.eye(2))

    def test_masked_random_matches_block_scan(self):
        rng = np.random.default_rng(42)
        a = rng.normal(size=(8, 8))
        # zero three of the four 4x4-aligned blocks
        a[0:4, 0:4] = 0.0
        a[0:4, 4:8] = 0.0
        a[4:8, 4:8] = 0.0
        m = dense_to_bsr(a, 4, 4)
        assert m.n_blocks == 1
        assert scan_nonzero_blocks(a, 4, 4) == [(1, 0)]
        assert np.array_equal(bsr_to_dense(m), a)

    def test_stored_blocks_match_scan_on_random_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            gh, gw = rng.integers(1, 5, size=2)
            bh, bw = rng.integers(1, 4, size=2)
            a = rng.normal(size=(gh * bh, gw * bw))
            dead = rng.random((gh, gw)) < 0.5
            a = np.where(np.repeat(np.repeat(~dead, bh, 0), bw, 1), a, 0.0)
            m = dense_to_bsr(a, bh, bw)
            stored = [(int(r), int(c)) for r, c in
                      zip(np.repeat(np.arange(gh), np.diff(m.row_ptr)), m.col_idx)]
            assert stored == scan_nonzero_blocks(a, bh, bw)
            # never store an all-zero block
            for blk in m.blocks:
                assert np.any(blk != 0.0)

    def test_divisibility_error_names_dimension(self):
        with pytest.raises(ShapeError, match="rows=6"):
            dense_to_bsr(np.ones((6, 4)), 4, 4)
        with pytest.raises(ShapeError, match="cols=6"):
            dense_to_bsr(np.ones((4, 6)), 4, 4)


class TestBsrToDense:
    def test_zero_block_bsr_gives_zero_matrix(self):
        m = BlockSparseMatrix(4, 4, 2, 2, np.zeros(3, dtype=np.int64),
                              np.zeros(0, dtype=np.int64), np.zeros((0, 2, 2)))
        assert np.array_equal(bsr_to_dense(m), np.zeros((4, 4)))

    def test_single_block_placement(self):
        blk = np.array([[1.0, 2.0], [3.0, 4.0]])
        m = BlockSparseMatrix(2, 4, 2, 2, np.array([0, 1]), np.array([1]),
                              blk[None])
        expect = np.array([[0.0, 0.0, 1.0, 2.0], [0.0, 0.0, 3.0, 4.0]])
        assert np.array_equal(bsr_to_dense(m), expect)

    def test_round_trip_identity_on_random_matrices(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            bh, bw = rng.integers(1, 5, size=2)
            gh, gw = rng.integers(1, 6, size=2)
            a = rng.normal(size=(gh * bh, gw * bw))
            a[rng.random(a.shape) < 0.6] = 0.0
            assert np.array_equal(bsr_to_dense(dense_to_bsr(a, bh, bw)), a)


class TestCsr:
    def test_zero_matrix(self):
        m = dense_to_csr(np.zeros((3, 5)))
        assert m.nnz == 0
        assert np.array_equal(csr_to_dense(m), np.zeros((3, 5)))

    def test_identity_layout(self):
        m = dense_to_csr(np.eye(2))
        assert list(m.row_ptr) == [0, 1, 2]
        assert list(m.col_idx) == [0, 1]
        assert list(m.values) == [1.0, 1.0]

    def test_round_trip_identity_on_random_matrices(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            r, c = rng.integers(1, 30, size=2)
            a = rng.normal(size=(r, c))
            a[rng.random(a.shape) < 0.7] = 0.0
            assert np.array_equal(csr_to_dense(dense_to_csr(a)), a)

    def test_validation_rejects_bad_row_ptr(self):
        with pytest.raises(ShapeError):
            from blockrnn.formats import CsrMatrix
            CsrMatrix(2, 2, np.array([0, 2, 1]), np.array([0]), np.array([1.0]))


class TestSparsityMeasures:
    def test_zero_matrix_is_fully_sparse(self):
        assert sparsity(np.zeros((3, 3))) == 1.0
        assert block_sparsity(np.zeros((4, 4)), 2, 2) == 1.0

    def test_identity_fractions(self):
        assert sparsity(np.eye(4)) == 0.75
        assert block_sparsity(np.eye(4), 2, 2) == 0.5

    def test_matches_brute_force_count(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.normal(size=(6, 8))
            a[rng.random(a.shape) < 0.5] = 0.0
            count = sum(1 for v in a.ravel() if v == 0.0)
            assert sparsity(a) == count / a.size
            dead = sum(1 for blk in (a[i:i + 2, j:j + 2]
                                     for i in range(0, 6, 2)
                                     for j in range(0, 8, 2))
                       if not np.any(blk != 0.0))
            assert block_sparsity(a, 2, 2) == dead / 12

    def test_divisibility_error(self):
        with pytest.raises(ShapeError):
            block_sparsity(np.ones((5, 4)), 2, 2)


class TestIndexingOverhead:
    def test_published_reference_points(self):
        # 16-bit values and indices: 1x1 blocks cost 200%, 4x4 cost 12.5%,
        # 16x16 drop under 1%
        assert indexing_overhead(16, 16, 1, 1, 2).overhead_ratio == 2.0
        assert indexing_overhead(16, 16, 4, 4, 2).overhead_ratio == 0.125
        assert indexing_overhead(16, 16, 16, 16, 2).overhead_ratio == 0.0078125

    def test_monotone_in_block_area(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            vb, ib = rng.integers(1, 64, size=2)
            b1 = tuple(rng.integers(1, 16, size=2))
            b2 = tuple(rng.integers(1, 16, size=2))
            if b1[0] * b1[1] == b2[0] * b2[1]:
                continue
            small, big = sorted([b1, b2], key=lambda b: b[0] * b[1])
            assert (indexing_overhead(vb, ib, *small).overhead_ratio
                    > indexing_overhead(vb, ib, *big).overhead_ratio)

    def test_rejects_nonpositive_inputs(self):
        with pytest.raises(ValueError, match="value_bits"):
            indexing_overhead(0, 16, 4, 4)
        with pytest.raises(ValueError, match="block_w"):
            indexing_overhead(16, 16, 4, -1)


def test_block_sparsity_lower_bound_from_stored_blocks():
    rng = np.random.default_rng(13)
    for _ in range(20):
        a = rng.normal(size=(12, 12))
        a[rng.random((12, 12)) < 0.7] = 0.0
        m = dense_to_bsr(a, 3, 3)
        total = 16
        assert block_sparsity(bsr_to_dense(m), 3, 3) >= 1.0 - m.n_blocks / total
        # equality since dense_to_bsr never stores an all-zero block
        assert block_sparsity(bsr_to_dense(m), 3, 3) == 1.0 - m.n_blocks / total
