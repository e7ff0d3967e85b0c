import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from racs.errors import DimensionError, RangeError, SingularityError
from racs.linalg import pinv_append_row, pinv_grad, pinv_rows


def fd_grad(phi, loss, h=1e-6):
    g = np.zeros_like(phi)
    for idx in np.ndindex(*phi.shape):
        p, m = phi.copy(), phi.copy()
        p[idx] += h
        m[idx] -= h
        g[idx] = (loss(p) - loss(m)) / (2 * h)
    return g


class TestPinvRows:
    def test_orthonormal_rows_give_transpose(self):
        rng = np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.standard_normal((9, 4)))
        phi = q.T
        state = pinv_rows(phi)
        np.testing.assert_allclose(state.psi, phi.T, atol=1e-10)
        assert state.ridge == 0.0

    def test_single_scaled_row(self):
        state = pinv_rows(np.array([[2.0, 0.0, 0.0]]))
        np.testing.assert_allclose(state.psi, [[0.5], [0.0], [0.0]], atol=1e-15)

    def test_random_right_inverse(self):
        phi = np.random.default_rng(1).standard_normal((4, 8))
        state = pinv_rows(phi)
        np.testing.assert_allclose(phi @ state.psi, np.eye(4), atol=1e-10)

    def test_cholesky_factor_reproduces_gram(self):
        phi = np.random.default_rng(2).standard_normal((5, 11))
        state = pinv_rows(phi)
        gram = phi @ phi.T
        L = state.gram_chol
        assert np.abs(L @ L.T - gram).max() <= 1e-8 * np.linalg.norm(gram)

    def test_dependent_rows_get_ridge(self, caplog):
        row = np.arange(1.0, 6.0)
        state = pinv_rows(np.vstack([row, 2 * row]))
        assert state.ridge == pytest.approx(1e-6 * np.trace(np.outer([1, 2], [1, 2]) * (row @ row)) / 2)
        assert np.all(np.isfinite(state.psi))
        assert "ridge" in caplog.text

    def test_all_zero_rows_rejected(self):
        with pytest.raises(SingularityError):
            pinv_rows(np.zeros((2, 4)))

    def test_more_rows_than_columns_rejected(self):
        with pytest.raises(DimensionError):
            pinv_rows(np.ones((3, 2)))

    def test_prefix_only_reads_its_rows(self):
        phi = np.random.default_rng(3).standard_normal((6, 10))
        a = pinv_rows(phi[:4]).psi
        phi[4:] = np.nan
        b = pinv_rows(phi[:4]).psi
        np.testing.assert_array_equal(a, b)


class TestAppendRow:
    def test_orthogonal_append(self):
        phi = np.eye(6)[:3]
        v = np.array([0, 0, 0, 3.0, 4.0, 0])
        state = pinv_append_row(pinv_rows(phi), v)
        np.testing.assert_allclose(state.psi[:, 3], v / 25.0, atol=1e-15)
        np.testing.assert_allclose(state.psi[:, :3], phi.T, atol=1e-15)

    def test_matches_batch_built_row_by_row(self):
        phi = np.random.default_rng(4).standard_normal((5, 12))
        state = pinv_rows(phi[:1])
        for row in phi[1:]:
            state = pinv_append_row(state, row)
        full = pinv_rows(phi)
        np.testing.assert_allclose(state.psi, full.psi, atol=1e-8)
        np.testing.assert_allclose(state.gram_chol, full.gram_chol, atol=1e-8)

    def test_duplicate_row_takes_ridged_fallback(self, caplog):
        phi = np.random.default_rng(5).standard_normal((3, 7))
        state = pinv_append_row(pinv_rows(phi), phi[1])
        assert state.ridge > 0
        assert "dependent" in caplog.text
        stacked = np.vstack([phi, phi[1]])
        ref = pinv_rows(stacked, ridge=1e-6 * np.trace(stacked @ stacked.T) / 4)
        np.testing.assert_allclose(state.psi, ref.psi, atol=1e-8)

    def test_cannot_exceed_n(self):
        state = pinv_rows(np.eye(3))
        with pytest.raises(RangeError):
            pinv_append_row(state, np.ones(3))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2**32 - 1))
    def test_incremental_equals_batch(self, n, seed):
        rng = np.random.default_rng(seed)
        r = int(rng.integers(1, n + 1))
        phi = rng.standard_normal((r, n))
        state = pinv_rows(phi[:1])
        for row in phi[1:]:
            state = pinv_append_row(state, row)
        np.testing.assert_allclose(state.psi, pinv_rows(phi).psi, atol=1e-8)


class TestPinvGrad:
    def test_zero_upstream(self):
        phi = np.random.default_rng(6).standard_normal((2, 5))
        g = pinv_grad(phi, pinv_rows(phi), np.zeros((5, 2)))
        np.testing.assert_array_equal(g, 0.0)

    def test_reciprocal_case(self):
        phi = np.array([[2.0, 0.0]])
        upstream = np.array([[1.0], [0.0]])  # loss = psi[0, 0] = 1/a
        g = pinv_grad(phi, pinv_rows(phi), upstream)
        assert g[0, 0] == pytest.approx(-0.25, abs=1e-9)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        phi = rng.standard_normal((3, 7))
        weights = rng.standard_normal((7, 3))
        analytic = pinv_grad(phi, pinv_rows(phi), weights)
        numeric = fd_grad(phi, lambda p: float(np.sum(weights * pinv_rows(p).psi)))
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        assert rel.max() < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_gradient_exactness_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        r = int(rng.integers(1, n))
        phi = rng.standard_normal((r, n))
        weights = rng.standard_normal((n, r))
        analytic = pinv_grad(phi, pinv_rows(phi), weights)
        numeric = fd_grad(phi, lambda p: float(np.sum(weights * pinv_rows(p).psi)))
        # normwise: elementwise ratios are meaningless where the derivative is ~0
        assert np.abs(analytic - numeric).max() / np.abs(numeric).max() < 1e-6
