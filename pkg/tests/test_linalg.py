import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bimodalnet.linalg import (
    ShapeError,
    frobenius_norm,
    frobenius_project,
    hadamard,
    matmul,
)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_projector_zeroes_row(self):
        p = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(p, b), [[5.0, 6.0], [0.0, 0.0]])

    def test_hand_product(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        # by hand: [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8]
        assert np.array_equal(matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])

    def test_transpose_flags(self, rng):
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((3, 4))
        assert np.allclose(matmul(a, b, transpose_a=True), a.T @ b)
        c = rng.standard_normal((4, 5))
        assert np.allclose(matmul(a, c, transpose_b=True), a @ c.T)
        x = rng.standard_normal((5, 3))
        y = rng.standard_normal((4, 5))
        assert np.allclose(matmul(x, y, transpose_a=True, transpose_b=True), x.T @ y.T)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))
        assert "(2, 3)" in str(exc.value)

    def test_rejects_vectors(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros(3), np.zeros((3, 2)))


class TestHadamard:
    def test_small_integers(self):
        assert np.array_equal(hadamard([1.0, 2.0], [3.0, 4.0]), [3.0, 8.0])

    def test_annihilator_and_identity(self, rng):
        u = rng.standard_normal(7)
        assert np.array_equal(hadamard(u, np.zeros(7)), np.zeros(7))
        assert np.array_equal(hadamard(u, np.ones(7)), u)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            hadamard(np.zeros(3), np.zeros(4))


class TestFrobeniusProject:
    def test_inside_ball_unchanged(self):
        m = np.array([[0.6, 0.0], [0.0, 0.8]])  # norm 1
        assert np.array_equal(frobenius_project(m, 2.0), m)

    def test_three_four_five(self):
        m = np.array([[3.0, 0.0], [0.0, 4.0]])  # norm 5, forced scale 2/5
        assert np.allclose(frobenius_project(m, 2.0), [[1.2, 0.0], [0.0, 1.6]])

    def test_zero_matrix(self):
        assert np.array_equal(frobenius_project(np.zeros((3, 2)), 0.5), np.zeros((3, 2)))

    def test_returns_copy(self):
        m = np.ones((2, 2))
        out = frobenius_project(m, 10.0)
        out[0, 0] = 99.0
        assert m[0, 0] == 1.0

    @pytest.mark.parametrize("lam", [0.0, -1.0])
    def test_nonpositive_lambda(self, lam):
        with pytest.raises(ValueError):
            frobenius_project(np.ones((2, 2)), lam)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_matmul_identity_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    a = rng.standard_normal((n, int(rng.integers(1, 7))))
    assert np.array_equal(matmul(np.eye(n), a), a)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_projection_idempotent_and_bounded(seed):
    rng = np.random.default_rng(seed)
    lam = float(rng.uniform(0.1, 5.0))
    m = rng.standard_normal((int(rng.integers(1, 6)), int(rng.integers(1, 6))))
    target = float(rng.uniform(0.0, 10.0 * lam))
    norm = frobenius_norm(m)
    if norm > 0:
        m = m * (target / norm)
    once = frobenius_project(m, lam)
    twice = frobenius_project(once, lam)
    assert frobenius_norm(once) <= lam + 1e-12
    assert np.max(np.abs(twice - once)) <= 1e-15
