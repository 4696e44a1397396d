import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedqr.linalg import (
    BasisError,
    RankError,
    ShapeError,
    as_matrix,
    frobenius_norm,
    matmul,
    slice_cols,
    slice_rows,
    subspace_residual,
    thin_qr,
)


def triple_loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for l in range(a.shape[1]):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(8.0).reshape(2, 4)
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_example(self):
        lhs = as_matrix([[1, 2], [3, 4]])
        rhs = as_matrix([[0], [1]])
        assert np.array_equal(matmul(lhs, rhs), as_matrix([[2], [4]]))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 3))
        assert np.max(np.abs(matmul(a, b) - triple_loop_matmul(a, b))) <= 1e-12

    def test_dimension_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(
        m=st.integers(1, 6),
        n=st.integers(1, 6),
        p=st.integers(1, 6),
        q=st.integers(1, 6),
        seed=st.integers(0, 2**31),
    )
    def test_associativity(self, m, n, p, q, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((m, n))
        b = rng.standard_normal((n, p))
        c = rng.standard_normal((p, q))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        scale = frobenius_norm(left) + 1.0
        assert frobenius_norm(left - right) <= 1e-9 * scale


class TestThinQr:
    def test_identity(self):
        q, r = thin_qr(np.eye(3))
        assert np.allclose(q, np.eye(3), atol=1e-15)
        assert np.allclose(r, np.eye(3), atol=1e-15)

    def test_single_column(self):
        q, r = thin_qr(as_matrix([[3.0], [4.0]]))
        assert np.allclose(q, [[0.6], [0.8]], atol=1e-12)
        assert np.allclose(r, [[5.0]], atol=1e-12)

    def test_zero_matrix(self):
        m = np.zeros((4, 2))
        q, r = thin_qr(m)
        assert np.allclose(r, 0.0)
        # Q is still an orthonormal completion and reconstruction holds
        assert np.max(np.abs(q.T @ q - np.eye(2))) <= 1e-10
        assert frobenius_norm(q @ r - m) <= 1e-10

    def test_random_shapes_orthonormal_and_reconstruct(self):
        rng = np.random.default_rng(1)
        checked = 0
        for _ in range(110):
            rows = int(rng.integers(1, 30))
            cols = int(rng.integers(1, 30))
            m = rng.standard_normal((rows, cols))
            if rng.random() < 0.25 and min(rows, cols) > 1:
                # make it rank deficient
                inner = int(rng.integers(1, min(rows, cols)))
                m = rng.standard_normal((rows, inner)) @ rng.standard_normal((inner, cols))
            q, r = thin_qr(m)
            width = min(rows, cols)
            assert q.shape == (rows, width)
            assert r.shape == (width, cols)
            assert np.max(np.abs(q.T @ q - np.eye(width))) <= 1e-10
            assert frobenius_norm(q @ r - m) <= 1e-10 * (1.0 + frobenius_norm(m))
            assert np.all(np.diagonal(r) >= 0.0)
            assert np.allclose(np.tril(r, -1), 0.0, atol=1e-12)
            checked += 1
        assert checked >= 100

    def test_deterministic_bits(self):
        rng = np.random.default_rng(2)
        m = rng.standard_normal((9, 5))
        q1, r1 = thin_qr(m)
        q2, r2 = thin_qr(m.copy())
        assert q1.tobytes() == q2.tobytes()
        assert r1.tobytes() == r2.tobytes()

    def test_rejects_nonfinite(self):
        m = np.array([[1.0, np.nan]])
        with pytest.raises(ValueError, match="NaN"):
            thin_qr(m)


class TestFrobenius:
    def test_zero(self):
        assert frobenius_norm(np.zeros((3, 4))) == 0.0

    def test_three_four_five(self):
        assert frobenius_norm(as_matrix([[3.0, 4.0]])) == pytest.approx(5.0, abs=1e-15)

    def test_matches_sum_oracle(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((6, 6))
        expected = 0.0
        for row in m:
            for x in row:
                expected += x * x
        assert abs(frobenius_norm(m) - np.sqrt(expected)) <= 1e-12


class TestSlices:
    def test_full_slice_is_copy(self):
        m = np.arange(12.0).reshape(3, 4)
        out = slice_cols(m, 4)
        assert np.array_equal(out, m)
        out[0, 0] = 99.0
        assert m[0, 0] == 0.0  # source unmodified

    def test_slice_rows_identity(self):
        assert np.array_equal(slice_rows(np.eye(3), 2), np.eye(3)[:2])

    def test_out_of_range(self):
        m = np.zeros((2, 2))
        with pytest.raises(RankError):
            slice_cols(m, 3)
        with pytest.raises(RankError):
            slice_rows(m, 0)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(2, 8), inner=st.integers(2, 8), seed=st.integers(0, 2**31))
    def test_reslicing_composes(self, n, inner, seed):
        rng = np.random.default_rng(seed)
        take_big = min(inner, n)
        take_small = max(1, take_big - 1)
        m = rng.standard_normal((4, n))
        direct = slice_cols(m, take_small)
        staged = slice_cols(slice_cols(m, take_big), take_small)
        assert np.array_equal(direct, staged)


class TestSubspaceResidual:
    def test_column_of_basis(self):
        q, _ = thin_qr(np.random.default_rng(4).standard_normal((8, 3)))
        v = q[:, [1]]
        assert subspace_residual(q, v) <= 1e-10

    def test_orthogonal_direction(self):
        basis = np.array([[1.0], [0.0]])
        v = np.array([[0.0], [1.0]])
        assert subspace_residual(basis, v) == pytest.approx(1.0, abs=1e-15)

    def test_pythagoras(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            q, _ = thin_qr(rng.standard_normal((10, 4)))
            v = rng.standard_normal((10, 2))
            residual = subspace_residual(q, v)
            projection = q @ (q.T @ v)
            total = frobenius_norm(v) ** 2
            assert abs(residual**2 + frobenius_norm(projection) ** 2 - total) <= 1e-9

    def test_rejects_non_orthonormal_basis(self):
        with pytest.raises(BasisError):
            subspace_residual(np.array([[1.0], [1.0]]), np.zeros((2, 1)))

    def test_row_mismatch(self):
        with pytest.raises(ShapeError):
            subspace_residual(np.eye(3), np.zeros((2, 1)))
