import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pessilab.exceptions import DidNotConverge, DimensionMismatch, InvalidConfig
from pessilab.reward_model import (BradleyTerryRewardModel, EnsembleHeads, RewardEnsembleModel, RewardHead,
                                   bt_grad, bt_loss, default_ridge, ensemble_reward, fit_bt, fit_ensemble,
                                   predict)
from pessilab.synthworld import WorldConfig, gen_preferences, gen_world


def random_diffs(seed, n=200, d=6):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(d)
    x = rng.standard_normal((n, d))
    labels = rng.random(n) < 1 / (1 + np.exp(-x @ w))
    return np.where(labels[:, None], x, -x)


def central_diff(f, x, h=1e-5):
    out = np.empty_like(x)
    for i in range(len(x)):
        dx = np.zeros_like(x)
        dx[i] = h
        out[i] = (f(x + dx) - f(x - dx)) / (2 * h)
    return out


def test_loss_at_zero_is_log_two():
    assert bt_loss(np.zeros(6), random_diffs(0)) == pytest.approx(np.log(2))


def test_single_pair_is_scalar_logistic():
    for t in (-2.0, 0.0, 0.7, 5.0):
        assert bt_loss([t, 0.0], [[1.0, 0.0]]) == pytest.approx(np.log1p(np.exp(-t)))


def test_symmetric_dataset_fits_zero():
    x = random_diffs(1)
    sym = np.vstack([x, -x])
    head = fit_bt(sym, ridge=0.1)
    assert np.abs(head.phi_hat).max() <= 1e-6
    assert np.abs(bt_grad(np.zeros(6), sym, 0.1)).max() <= 1e-12


def test_pairs_layout_equals_differences():
    rng = np.random.default_rng(2)
    pairs = rng.standard_normal((30, 2, 4))
    phi = rng.standard_normal(4)
    assert bt_loss(phi, pairs) == pytest.approx(bt_loss(phi, pairs[:, 0] - pairs[:, 1]))


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    x = random_diffs(seed)
    phi = np.random.default_rng(100 + seed).standard_normal(6)
    g = bt_grad(phi, x, 0.05)
    fd = central_diff(lambda p: bt_loss(p, x, 0.05), phi)
    assert np.linalg.norm(fd - g) <= 1e-6 * np.linalg.norm(g)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(0.01, 0.99))
def test_loss_is_convex(seed, t):
    rng = np.random.default_rng(seed)
    x = random_diffs(seed % 1000, n=50, d=4)
    a, b = 3 * rng.standard_normal(4), 3 * rng.standard_normal(4)
    mix = bt_loss(t * a + (1 - t) * b, x, 0.01)
    assert mix <= t * bt_loss(a, x, 0.01) + (1 - t) * bt_loss(b, x, 0.01) + 1e-10


def test_fit_converges_and_descends():
    x = random_diffs(3)
    head = fit_bt(x, ridge=0.01)
    assert head.fit_diag["converged"]
    assert head.fit_diag["grad_norm"] <= 1e-6
    assert bt_loss(head.phi_hat, x, 0.01) <= bt_loss(np.zeros(6), x, 0.01)


def test_swapping_labels_negates_minimizer():
    x = random_diffs(4)
    a = fit_bt(x, ridge=0.01).phi_hat
    b = fit_bt(-x, ridge=0.01).phi_hat
    np.testing.assert_allclose(a, -b, atol=1e-6)


def test_noise_free_labels_recover_gold_direction():
    world = gen_world(WorldConfig(dim=8, n_prompts=200, ood_fraction=0.0, heldout_scale=1.0, heldout_dim=1,
                                  seed=5))
    data = gen_preferences(world, 5000, noise_rate=0.0, temperature=0.0, seed=5)
    head = fit_bt(data, 1e-3, world, max_iters=20000)
    cos = head.phi_hat @ world.phi_star / np.linalg.norm(head.phi_hat)
    assert cos >= 0.95


def test_non_convergence_is_reported():
    x = random_diffs(5)
    with pytest.warns(RuntimeWarning):
        head = fit_bt(x, 0.0, max_iters=2, tol=1e-12)
    assert head.fit_diag["converged"] is False
    with pytest.raises(DidNotConverge):
        fit_bt(x, 0.0, max_iters=2, tol=1e-12, strict=True)


def test_fit_rejects_empty_and_negative_ridge():
    with pytest.raises(InvalidConfig):
        fit_bt(np.zeros((0, 3)), 0.1)
    with pytest.raises(InvalidConfig):
        fit_bt(random_diffs(0), -1.0)


def test_predict_is_linear():
    rng = np.random.default_rng(6)
    head = RewardHead(rng.standard_normal(5), 0.0)
    e1, e2 = rng.standard_normal(5), rng.standard_normal(5)
    assert predict(head, e1 + e2) == pytest.approx(predict(head, e1) + predict(head, e2), abs=1e-12)
    assert predict(RewardHead(np.zeros(5), 0.0), e1) == 0.0
    u = e1 / np.linalg.norm(e1)
    assert predict(RewardHead(u, 0.0), u) == pytest.approx(1.0)
    with pytest.raises(DimensionMismatch):
        predict(head, np.ones(4))


def test_default_ridge_scales_with_pairs():
    assert default_ridge(2000) == pytest.approx(1 / 2000)
    assert default_ridge(10, 2.0) == pytest.approx(0.2)


def test_degenerate_ensemble_has_zero_spread():
    x = random_diffs(7)
    ens = fit_ensemble(x, 4, 0.01, seed=0, bootstrap=False, init_jitter=0.0)
    w = ens.weights
    assert np.abs(w - w[0]).max() == 0.0
    e = np.random.default_rng(0).standard_normal((10, 6))
    np.testing.assert_allclose(ensemble_reward(ens, e), e @ w[0])


def test_bootstrap_ensemble_has_positive_spread():
    x = random_diffs(8, n=500, d=8)
    ens = fit_ensemble(x, 5, 0.01, seed=1)
    e = np.random.default_rng(1).standard_normal((1000, 8))
    spread = (e @ ens.weights.T).var(axis=1)
    assert np.mean(spread > 0) >= 0.99


def test_ensemble_is_deterministic():
    x = random_diffs(9)
    a = fit_ensemble(x, 3, 0.01, seed=4).weights
    b = fit_ensemble(x, 3, 0.01, seed=4).weights
    assert np.array_equal(a, b)


def test_ensemble_reward_two_point_variance():
    heads = [RewardHead(np.array([1.0, 0.0]), 0.0), RewardHead(np.array([-1.0, 0.0]), 0.0)]
    e = np.array([1.0, 0.0])
    assert ensemble_reward(EnsembleHeads(heads, gamma=1.0), e) == pytest.approx(-1.0)
    assert ensemble_reward(EnsembleHeads(heads, gamma=0.0), e) == pytest.approx(0.0)
    assert ensemble_reward(EnsembleHeads(heads, 2.0, "std"), e) == pytest.approx(-2.0)


def test_ensemble_validation():
    h = RewardHead(np.zeros(2), 0.0)
    with pytest.raises(InvalidConfig):
        EnsembleHeads([h])
    with pytest.raises(InvalidConfig):
        EnsembleHeads([h, h], penalty_stat="mad")
    with pytest.raises(InvalidConfig):
        fit_ensemble(random_diffs(0), 1, 0.1, 0)


def test_head_serialization_round_trip():
    ens = fit_ensemble(random_diffs(10), 2, 0.01, seed=0)
    back = EnsembleHeads.from_dict(ens.to_dict())
    assert np.array_equal(back.weights, ens.weights)
    assert back.penalty_stat == ens.penalty_stat


def test_estimators_follow_sklearn_conventions():
    rng = np.random.default_rng(11)
    pairs = rng.standard_normal((200, 2, 4))
    w = np.array([1.0, -1.0, 0.5, 0.0])
    swap = (pairs[:, 0] @ w) < (pairs[:, 1] @ w)
    pairs[swap] = pairs[swap][:, ::-1]
    model = BradleyTerryRewardModel(ridge=1e-3).fit(pairs)
    assert model.get_params()["ridge"] == 1e-3
    assert model.coef_.shape == (4,)
    assert model.score(pairs) > 0.95
    assert model.predict(pairs[:3, 0]).shape == (3,)
    ens = RewardEnsembleModel(n_heads=3).fit(pairs)
    assert ens.predict(pairs[:5, 0]).shape == (5,)
    with pytest.raises(DimensionMismatch):
        model.fit(pairs[:, 0])
