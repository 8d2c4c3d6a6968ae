import io

import numpy as np
import pytest

from mmunlearn import linalg
from mmunlearn.errors import ContractError, DegenerateInputError, DimensionError


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(9, dtype=float).reshape(3, 3)
        assert np.array_equal(linalg.matmul(np.eye(3), m), m)

    def test_hand_case(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.0], [1.0]])
        assert np.array_equal(linalg.matmul(a, b), [[2.0], [4.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        assert np.max(np.abs(linalg.matmul(a, b) - naive_matmul(a, b))) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = rng.standard_normal((4, 5))
            b = rng.standard_normal((5, 6))
            c = rng.standard_normal((6, 3))
            left = linalg.matmul(linalg.matmul(a, b), c)
            right = linalg.matmul(a, linalg.matmul(b, c))
            assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


class TestCovariance:
    def test_orthonormal_rows(self):
        c = linalg.covariance(np.eye(2))
        assert np.allclose(c, [[0.5, 0.0], [0.0, 0.5]], atol=1e-15)

    def test_single_row(self):
        c = linalg.covariance(np.array([[2.0, 0.0]]))
        assert np.allclose(c, [[4.0, 0.0], [0.0, 0.0]], atol=1e-15)

    def test_outer_product_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((20, 4))
        oracle = sum(np.outer(row, row) for row in x) / 20
        assert np.max(np.abs(linalg.covariance(x) - oracle)) <= 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        c = linalg.covariance(rng.standard_normal((11, 6)))
        assert np.array_equal(c, c.T)


class TestSymEig:
    def test_identity(self):
        vals, vecs = linalg.sym_eig(np.eye(2))
        assert np.allclose(vals, [1.0, 1.0])
        assert np.allclose(vecs.T @ vecs, np.eye(2), atol=1e-10)

    def test_diagonal(self):
        vals, vecs = linalg.sym_eig(np.diag([2.0, 1.0]))
        assert np.allclose(vals, [1.0, 2.0])
        assert np.allclose(np.abs(vecs), [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)

    def test_hand_characteristic_polynomial(self):
        # [[2,1],[1,2]]: eigenvalues 1, 3 with eigenvectors (1,-1)/sqrt2, (1,1)/sqrt2
        vals, vecs = linalg.sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert np.allclose(vals, [1.0, 3.0], atol=1e-12)
        s = 1 / np.sqrt(2)
        assert np.allclose(np.abs(vecs[:, 0]), [s, s], atol=1e-10)
        assert np.allclose(np.abs(vecs[:, 1]), [s, s], atol=1e-10)

    @pytest.mark.parametrize("d", [3, 8, 32])
    def test_reconstruction_and_orthonormality(self, d):
        rng = np.random.default_rng(d)
        x = rng.standard_normal((4 * d, d))
        c = linalg.covariance(x)
        vals, vecs = linalg.sym_eig(c)
        assert np.all(np.diff(vals) >= -1e-12)
        assert np.all(vals >= -1e-10)
        recon = vecs @ np.diag(vals) @ vecs.T
        assert linalg.frobenius_norm(recon - c) <= 1e-9 * max(1.0, linalg.frobenius_norm(c))
        assert np.max(np.abs(vecs.T @ vecs - np.eye(d))) <= 1e-10

    def test_asymmetric_rejected(self):
        with pytest.raises(ContractError):
            linalg.sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_sign_convention_deterministic(self):
        rng = np.random.default_rng(7)
        c = linalg.covariance(rng.standard_normal((30, 5)))
        v1, u1 = linalg.sym_eig(c)
        v2, u2 = linalg.sym_eig(c.copy())
        assert np.array_equal(v1, v2)
        assert np.array_equal(u1, u2)
        for k in range(5):
            idx = np.argmax(np.abs(u1[:, k]))
            assert u1[idx, k] > 0


class TestQrOrthonormal:
    def test_already_orthonormal(self):
        g = np.eye(4)[:, :2]
        q = linalg.qr_orthonormal(g)
        assert np.allclose(np.abs(q), g, atol=1e-12)

    def test_single_column(self):
        q = linalg.qr_orthonormal(np.array([[3.0], [4.0]]))
        assert np.allclose(np.abs(q), [[0.6], [0.8]], atol=1e-12)

    def test_projector_matches_gram_schmidt(self):
        rng = np.random.default_rng(8)
        g = rng.standard_normal((8, 3))
        q = linalg.qr_orthonormal(g)
        # classical Gram-Schmidt oracle
        basis = []
        for j in range(3):
            v = g[:, j].copy()
            for b in basis:
                v -= np.dot(b, g[:, j]) * b
            basis.append(v / np.linalg.norm(v))
        gs = np.column_stack(basis)
        assert np.max(np.abs(q @ q.T - gs @ gs.T)) <= 1e-9

    def test_orthonormality(self):
        rng = np.random.default_rng(9)
        g = rng.standard_normal((10, 4))
        q = linalg.qr_orthonormal(g)
        assert np.max(np.abs(q.T @ q - np.eye(4))) <= 1e-10

    def test_projector_idempotent(self):
        rng = np.random.default_rng(10)
        g = rng.standard_normal((9, 3))
        q = linalg.qr_orthonormal(g)
        q2 = linalg.qr_orthonormal(q)
        assert linalg.frobenius_norm(q2 @ q2.T - q @ q.T) <= 1e-10

    def test_rank_deficient_rejected(self):
        g = np.ones((5, 2))
        with pytest.raises(DegenerateInputError):
            linalg.qr_orthonormal(g)


class TestFrobeniusNorm:
    def test_zero(self):
        assert linalg.frobenius_norm(np.zeros((3, 3))) == 0.0

    def test_three_four_five(self):
        assert linalg.frobenius_norm(np.array([[3.0, 4.0]])) == 5.0

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(11)
        m = rng.standard_normal((6, 7))
        oracle = np.sqrt(sum(v * v for v in m.reshape(-1)))
        assert abs(linalg.frobenius_norm(m) - oracle) <= 1e-12


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(12)
        m = rng.standard_normal((5, 3))
        buf = io.BytesIO()
        linalg.write_matrix(buf, m)
        buf.seek(0)
        out = linalg.read_matrix(buf)
        assert np.array_equal(m, out)

    def test_magic(self):
        buf = io.BytesIO()
        linalg.write_matrix(buf, np.ones((2, 2)))
        assert buf.getvalue()[:4] == b"NSUM"

    def test_bad_magic_rejected(self):
        with pytest.raises(ContractError):
            linalg.read_matrix(io.BytesIO(b"XXXX" + b"\x00" * 16))
