import numpy as np
import pytest

from tsdlab.errors import InvalidArgument, InvalidMatrix, ShapeMismatch
from tsdlab.spectral import (
    change_rates,
    core_energy_fraction,
    frob_norm,
    project_global,
    scaled_rate,
    scaled_rates,
    svd,
    top_k,
)


def _random_shapes(count, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(1, 65))
        m = int(rng.integers(1, 129))
        if rng.random() < 0.3:
            n, m = min(m, 64), n
        yield rng.standard_normal((n, m))


def test_svd_reconstructs_and_is_orthonormal():
    for w in _random_shapes(200):
        f = svd(w)
        k = min(w.shape)
        scale = max(1.0, np.linalg.norm(w))
        np.testing.assert_allclose(f.reconstruct(), w, atol=1e-10 * scale)
        np.testing.assert_allclose(f.u.T @ f.u, np.eye(k), atol=1e-10)
        np.testing.assert_allclose(f.vt @ f.vt.T, np.eye(k), atol=1e-10)
        np.testing.assert_allclose(f.vt_full @ f.vt_full.T, np.eye(w.shape[1]), atol=1e-10)
        assert np.all(np.diff(f.sigma) <= 1e-12)
        assert np.all(f.sigma >= 0)


def test_svd_signs_are_canonical():
    for w in _random_shapes(50, seed=1):
        f = svd(w)
        pivots = np.argmax(np.abs(f.u), axis=0)
        assert np.all(f.u[pivots, np.arange(f.k)] > 0)


def test_svd_is_deterministic():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((6, 9))
    a, b = svd(w), svd(w.copy())
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.vt, b.vt)


def test_factors_are_read_only():
    f = svd(np.eye(3))
    with pytest.raises(ValueError):
        f.u[0, 0] = 2.0


def test_projection_of_w_is_diagonal_sigma():
    for w in _random_shapes(200, seed=2):
        f = svd(w)
        p = project_global(f, w)
        assert p.coeffs.shape == (f.k, w.shape[1])
        np.testing.assert_allclose(p.diagonal(), f.sigma, atol=1e-10 * max(1.0, f.sigma[0]))
        off = p.coeffs.copy()
        off[np.arange(f.k), np.arange(f.k)] = 0.0
        assert np.max(np.abs(off)) <= 1e-10 * max(1.0, f.sigma[0])


def test_projection_is_complete():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((5, 8))
    a = rng.standard_normal((5, 8))
    f = svd(w)
    coeffs = project_global(f, a).coeffs
    rebuilt = f.u @ coeffs @ f.vt_full
    np.testing.assert_allclose(rebuilt, a, atol=1e-12)


def test_change_rates_match_per_direction_loop():
    for w in _random_shapes(200, seed=4):
        f = svd(w)
        delta_w = np.random.default_rng(int(w.size)).standard_normal(w.shape)
        cr = change_rates(f, delta_w, 1e-6)
        tol = 1e-12 * np.linalg.norm(delta_w)
        for i in range(f.k):
            expected = f.u[:, i] @ delta_w @ f.vt[i]
            assert abs(cr.signed[i] * (f.sigma[i] + 1e-6) - expected) <= tol
        np.testing.assert_array_equal(cr.delta, np.abs(cr.signed))


def test_change_rate_of_core_basis_update():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((8, 12))
    f = svd(w)
    cr = change_rates(f, 0.5 * f.core_basis(2), 1e-6)
    assert cr.delta[2] == pytest.approx(0.5 / (f.sigma[2] + 1e-6), rel=1e-12)
    others = np.delete(cr.delta, 2)
    assert np.all(others < 1e-12)
    assert top_k(cr, 1) == [2]


def test_off_diagonal_global_basis_leaves_rates_unchanged():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((6, 10))
    f = svd(w)
    cr = change_rates(f, f.global_basis(0, 3) + f.global_basis(4, 9), 1e-6)
    assert np.all(cr.delta < 1e-12)


def test_zero_update_ranks_by_index():
    f = svd(np.random.default_rng(8).standard_normal((5, 7)))
    cr = change_rates(f, np.zeros((5, 7)))
    assert np.all(cr.delta == 0)
    assert top_k(cr, 5) == [0, 1, 2, 3, 4]


def test_ranking_orders_by_rate_then_index():
    rng = np.random.default_rng(11)
    f = svd(rng.standard_normal((6, 6)))
    delta_w = f.core_basis(1) * (f.sigma[1] + 1e-6) + f.core_basis(4) * (f.sigma[4] + 1e-6)
    cr = change_rates(f, delta_w, 1e-6)
    assert set(top_k(cr, 2)) == {1, 4}
    assert list(cr.ranking) == sorted(range(6), key=lambda i: (-cr.delta[i], i))


def test_ranking_is_read_only():
    f = svd(np.eye(3))
    cr = change_rates(f, np.eye(3))
    with pytest.raises(ValueError):
        cr.ranking[0] = 1


def test_top_k_range_checked():
    f = svd(np.eye(4))
    cr = change_rates(f, np.eye(4))
    with pytest.raises(InvalidArgument):
        top_k(cr, 0)
    with pytest.raises(InvalidArgument):
        top_k(cr, 5)


def test_change_rates_reject_bad_input():
    f = svd(np.eye(4))
    with pytest.raises(InvalidArgument):
        change_rates(f, np.eye(4), epsilon=0.0)
    with pytest.raises(ShapeMismatch):
        change_rates(f, np.ones((4, 5)))
    with pytest.raises(InvalidMatrix):
        svd(np.array([1.0, 2.0]))
    with pytest.raises(InvalidMatrix):
        svd(np.array([[1.0, np.nan]]))


def test_scaled_rate():
    assert scaled_rate(0.0) == 0.0
    assert scaled_rate(np.e - 1) == pytest.approx(1.0 / 3.0)
    np.testing.assert_allclose(scaled_rates([0.0, np.e - 1]), [0.0, 1.0 / 3.0])
    with pytest.raises(InvalidArgument):
        scaled_rate(-1.0)


def test_frob_norm_matches_numpy():
    a = np.random.default_rng(9).standard_normal((7, 3))
    assert frob_norm(a) == pytest.approx(np.linalg.norm(a), rel=1e-14)


def test_core_energy_fraction():
    rng = np.random.default_rng(10)
    w = rng.standard_normal((5, 9))
    f = svd(w)
    assert core_energy_fraction(f, w) == pytest.approx(1.0, abs=1e-12)
    assert core_energy_fraction(f, f.global_basis(1, 3)) == pytest.approx(0.0, abs=1e-12)
    assert core_energy_fraction(f, np.zeros_like(w)) == 0.0
    mixed = f.core_basis(0) + f.global_basis(0, 2)
    assert core_energy_fraction(f, mixed) == pytest.approx(0.5, abs=1e-12)


def test_projection_of_single_global_basis():
    rng = np.random.default_rng(12)
    f = svd(rng.standard_normal((5, 7)))
    coeffs = project_global(f, 0.7 * f.global_basis(0, 1)).coeffs
    expected = np.zeros((5, 7))
    expected[0, 1] = 0.7
    np.testing.assert_allclose(coeffs, expected, atol=1e-12)


def test_diagonal_change_is_projection_of_update():
    rng = np.random.default_rng(13)
    for _ in range(100):
        n, m = (int(v) for v in rng.integers(2, 20, size=2))
        w = rng.standard_normal((n, m))
        w_star = w + rng.standard_normal((n, m))
        f = svd(w)
        lhs = project_global(f, w_star).diagonal() - project_global(f, w).diagonal()
        rhs = project_global(f, w_star - w).diagonal()
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * max(1.0, np.linalg.norm(w_star)))
