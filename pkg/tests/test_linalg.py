import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pessilab.exceptions import DimensionMismatch, NotPositiveDefinite
from pessilab.linalg import SpdMatrix, cholesky, quad_form_inv, quad_forms, rank1_update, solve_spd


def random_spd(rng, d, ridge=0.5):
    a = rng.standard_normal((d, d))
    return a @ a.T + ridge * np.eye(d)


def test_cholesky_small_cases():
    np.testing.assert_array_equal(cholesky(np.eye(2)), np.eye(2))
    np.testing.assert_allclose(cholesky([[4.0, 0.0], [0.0, 9.0]]), [[2.0, 0.0], [0.0, 3.0]])


def test_cholesky_reconstructs_random_spd():
    rng = np.random.default_rng(1)
    a = random_spd(rng, 8)
    L = cholesky(a)
    assert np.allclose(np.triu(L, 1), 0)
    assert np.linalg.norm(L @ L.T - a) <= 1e-10 * np.linalg.norm(a)


def test_cholesky_rejects_indefinite_and_asymmetric():
    with pytest.raises(NotPositiveDefinite):
        cholesky([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefinite):
        cholesky([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(NotPositiveDefinite):
        SpdMatrix(np.zeros((3, 3)))


def test_quad_form_inv_examples():
    assert quad_form_inv(SpdMatrix(2 * np.eye(2)), [1.0, 1.0]) == pytest.approx(1.0)
    assert quad_form_inv(SpdMatrix(np.eye(3)), np.zeros(3)) == 0.0


def test_quad_form_inv_matches_dense_inverse():
    rng = np.random.default_rng(2)
    a = random_spd(rng, 8)
    v = rng.standard_normal(8)
    m = SpdMatrix(a)
    expected = v @ np.linalg.inv(a) @ v
    assert quad_form_inv(m, v) == pytest.approx(expected, rel=1e-10)
    assert quad_forms(m, v[None])[0] == pytest.approx(expected, rel=1e-10)


def test_quad_form_inv_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        quad_form_inv(SpdMatrix(np.eye(3)), np.ones(2))
    with pytest.raises(DimensionMismatch):
        solve_spd(SpdMatrix(np.eye(3)), np.ones(4))


@pytest.mark.parametrize("alpha", [-2.0, 0.5, 3.0])
def test_quad_form_is_quadratic_in_scale(alpha):
    rng = np.random.default_rng(3)
    m = SpdMatrix(random_spd(rng, 6))
    v = rng.standard_normal(6)
    assert quad_form_inv(m, alpha * v) == pytest.approx(alpha**2 * quad_form_inv(m, v), rel=1e-10)


def test_solve_spd():
    np.testing.assert_allclose(solve_spd(SpdMatrix(np.eye(3)), [1.0, 2.0, 3.0]), [1, 2, 3])
    np.testing.assert_allclose(solve_spd(SpdMatrix(2 * np.eye(2)), [4.0, 6.0]), [2.0, 3.0])
    rng = np.random.default_rng(4)
    a = random_spd(rng, 10)
    v = rng.standard_normal(10)
    x = solve_spd(SpdMatrix(a), v)
    assert np.linalg.norm(a @ x - v) <= 1e-9 * np.linalg.norm(v)


def test_rank1_update_scalar_and_zero():
    m = rank1_update(SpdMatrix([[1.0]]), [1.0])
    np.testing.assert_allclose(m.inv, [[0.5]])
    np.testing.assert_allclose(m.entries, [[2.0]])
    base = SpdMatrix(np.eye(3))
    assert rank1_update(base, np.zeros(3)) is base


def test_thousand_updates_track_dense_inverse():
    rng = np.random.default_rng(5)
    m = SpdMatrix.scaled_identity(8)
    for e in rng.standard_normal((1000, 8)):
        m = rank1_update(m, e)
    assert np.abs(m.inv - np.linalg.inv(m.entries)).max() <= 1e-8
    assert np.linalg.norm(m.chol @ m.chol.T - m.entries) <= 1e-10 * np.linalg.norm(m.entries)


def test_sherman_morrison_without_refresh_stays_accurate():
    rng = np.random.default_rng(6)
    m = SpdMatrix.scaled_identity(8, refresh_every=10**9)
    for e in rng.standard_normal((2000, 8)) / 3:
        m = rank1_update(m, e)
    assert m.updates_since_refresh == 2000
    assert np.abs(m.inv @ m.entries - np.eye(8)).max() <= 1e-8


def test_refresh_changes_nothing_downstream():
    rng = np.random.default_rng(7)
    m = SpdMatrix.scaled_identity(6, refresh_every=10**9)
    for e in rng.standard_normal((300, 6)):
        m = rank1_update(m, e)
    fresh = m.refreshed()
    v = rng.standard_normal((20, 6))
    np.testing.assert_allclose(quad_forms(m, v), quad_forms(fresh, v), rtol=1e-8)
    np.testing.assert_allclose(solve_spd(m, v[0]), solve_spd(fresh, v[0]), rtol=1e-8)


def test_cached_arrays_are_read_only():
    m = SpdMatrix(np.eye(2))
    with pytest.raises(ValueError):
        m.inv[0, 0] = 5.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 8))
def test_update_never_increases_uncertainty(seed, d):
    rng = np.random.default_rng(seed)
    m = SpdMatrix(random_spd(rng, d))
    v, e = rng.standard_normal(d), rng.standard_normal(d)
    assert quad_form_inv(rank1_update(m, e), v) <= quad_form_inv(m, v) + 1e-12
