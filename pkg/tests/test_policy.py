import numpy as np
import pytest

from pessilab.exceptions import IndexOutOfRange, InvalidConfig, MissingInput, NonFiniteEncountered, ShapeMismatch
from pessilab.harness.experiment import prepare
from pessilab.policy import PolicyState, TrainConfig, kl_divergence, objective, policy_gradient, train
from pessilab.reward_model import RewardHead

VARIANTS = ("vanilla", "samplewise", "ensemble", "advpo", "advpo_noref")


@pytest.fixture(scope="module")
def small():
    return prepare(seed=1, n_pairs=600, n_heads=3, n_prompts=60)


def random_state(rng, n=4, c=5):
    return PolicyState(np.arange(n), rng.standard_normal((n, c)), rng.standard_normal((n, c)))


def uniform_state(n=3, c=4):
    return PolicyState(np.arange(n), np.zeros((n, c)), np.zeros((n, c)))


def test_probabilities_normalized():
    p = random_state(np.random.default_rng(0)).probs()
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-12


def test_state_rejects_bad_shapes_and_values():
    with pytest.raises(ShapeMismatch):
        PolicyState([0], np.zeros((1, 3)), np.zeros((1, 4)))
    with pytest.raises(NonFiniteEncountered):
        PolicyState([0], [[np.nan, 0.0]], [[0.0, 0.0]])


def test_objective_constant_rewards():
    s = uniform_state()
    assert objective(s, np.full((3, 4), 2.5), beta=1.0) == pytest.approx(2.5)


def test_objective_at_reference_ignores_beta():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((3, 4))
    s = PolicyState(np.arange(3), logits, logits)
    r = rng.standard_normal((3, 4))
    expected = (s.probs() * r).sum(axis=1).mean()
    assert objective(s, r, beta=1e12) == pytest.approx(expected, abs=1e-12)


def test_objective_subtracts_reference_rewards():
    rng = np.random.default_rng(2)
    s = random_state(rng)
    r = rng.standard_normal((4, 5))
    base = objective(s, r, 0.3)
    assert objective(s, r, 0.3, ref_rewards=np.full(4, 0.7)) == pytest.approx(base - 0.7)
    with pytest.raises(ShapeMismatch):
        objective(s, np.zeros((4, 4)), 0.3)


def test_gradient_zero_at_symmetry_and_sign():
    assert np.abs(policy_gradient(uniform_state(), np.ones((3, 4)), 0.0)).max() == 0.0
    s = PolicyState([0], np.zeros((1, 2)), np.zeros((1, 2)))
    g = policy_gradient(s, np.array([[1.0, 0.0]]), 0.0)
    assert g[0, 0] > 0 > g[0, 1]


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng)
    r = rng.standard_normal((4, 5))
    beta = float(rng.uniform(0, 2))
    g = policy_gradient(s, r, beta)
    h = 1e-5
    fd = np.empty_like(g)
    n = len(s.prompt_ids)
    for i in range(4):
        for j in range(5):
            up, dn = s.copy(), s.copy()
            up.logits[i, j] += h
            dn.logits[i, j] -= h
            fd[i, j] = n * (objective(up, r, beta) - objective(dn, r, beta)) / (2 * h)
    assert np.linalg.norm(fd - g) <= 1e-6 * np.linalg.norm(g)


def test_gradient_shift_invariance():
    rng = np.random.default_rng(3)
    s = random_state(rng)
    r = rng.standard_normal((4, 5))
    shifted = r + rng.standard_normal((4, 1)) * 10
    assert np.abs(policy_gradient(s, r, 0.5) - policy_gradient(s, shifted, 0.5)).max() <= 1e-10


def test_kl_examples():
    s = PolicyState([7], np.zeros((1, 4)), np.zeros((1, 4)))
    assert kl_divergence(s, 7) == 0.0
    point = PolicyState([7], [[500.0, 0.0, 0.0, 0.0]], np.zeros((1, 4)))
    assert kl_divergence(point, 7) == pytest.approx(np.log(4))
    with pytest.raises(IndexOutOfRange):
        kl_divergence(s, 3)


def test_kl_never_negative():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        s = PolicyState([0], 3 * rng.standard_normal((1, 6)), 3 * rng.standard_normal((1, 6)))
        assert kl_divergence(s, 0) >= 0.0


def test_config_validation():
    for kw in ({"variant": "ppo"}, {"steps": 0}, {"lr": -1.0}, {"beta": -0.1}, {"B": 0.0},
               {"eval_every": 0}):
        with pytest.raises(InvalidConfig):
            TrainConfig(**kw)


def test_missing_inputs(small):
    with pytest.raises(MissingInput):
        train(small.world, small.head, None, None, TrainConfig("advpo", steps=2))
    with pytest.raises(MissingInput):
        train(small.world, small.head, small.prec, None, TrainConfig("ensemble", steps=2))
    with pytest.raises(MissingInput):
        train(small.world, small.head, small.prec, None, TrainConfig("advpo", steps=2))


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_runs_and_logs(small, variant):
    m = train(small.world, small.head, small.prec, small.ens, TrainConfig(variant, steps=30, eval_every=10),
              references=small.prefs.references)
    steps = [r["step"] for r in m.rows]
    assert steps == list(range(30))
    assert all(r["kl_mean"] >= -1e-10 for r in m.rows)
    evals = [r["step"] for r in m.rows if not np.isnan(r["val_proxy"])]
    assert evals == [0, 10, 20, 29]
    assert m.best_checkpoint["step"] in evals
    assert m.samples and {"U_ci", "abs_err"} <= set(m.samples[0])


def test_gold_head_never_loses_gold(small):
    gold_head = RewardHead(small.world.phi_star.copy(), 0.0)
    m = train(small.world, gold_head, small.prec, None, TrainConfig("vanilla", steps=300))
    gold = m.column("gold_mean")
    assert np.all(np.diff(gold) >= -1e-9)


def test_zero_learning_rate_is_a_null_step(small):
    m = train(small.world, small.head, small.prec, None,
              TrainConfig("advpo", steps=20, lr=0.0), references=small.prefs.references)
    assert np.array_equal(m.final_policy.logits, m.final_policy.ref_logits)
    for key in ("gold_mean", "proxy_mean", "u_mean", "lambda_star"):
        col = m.column(key)
        assert np.all(col == col[0])


def test_training_is_deterministic(small):
    cfg = TrainConfig("advpo", steps=50, seed=3)
    a = train(small.world, small.head, small.prec, None, cfg, references=small.prefs.references)
    b = train(small.world, small.head, small.prec, None, cfg, references=small.prefs.references)
    assert a.rows == b.rows or all(
        np.array_equal(np.array(list(x.values())), np.array(list(y.values())), equal_nan=True)
        for x, y in zip(a.rows, b.rows))
    assert a.samples == b.samples


def test_kl_bounded_with_positive_beta(small):
    beta = 0.5
    m = train(small.world, small.head, small.prec, None, TrainConfig("vanilla", steps=400, beta=beta))
    raw = small.world.embeddings @ small.head.phi_hat
    bound = 2 * np.abs(raw).max() / beta + np.log(small.world.n_candidates)
    assert m.column("kl_mean").max() <= bound


def test_vanilla_mass_drifts_to_overrated_candidates(small):
    m = train(small.world, small.head, small.prec, None, TrainConfig("vanilla", steps=1500, sample_every=0))
    world = small.world
    ids = m.final_policy.prompt_ids[: len(world.splits["policy"])]
    p = m.final_policy.probs()[: len(ids)]
    overrated = world.embeddings[ids] @ small.head.phi_hat > world.embeddings[ids] @ world.phi_star
    start = m.final_policy.ref_probs()[: len(ids)]
    assert (p * overrated).sum(1).mean() > 0.75
    assert (p * overrated).sum(1).mean() > (start * overrated).sum(1).mean()


def test_constant_reference_shift_leaves_logits_unchanged(small):
    cfg = TrainConfig("advpo", steps=100, seed=0)
    a = train(small.world, small.head, small.prec, None, cfg, references=small.prefs.references)
    b = train(small.world, small.head, small.prec, None, cfg, references=small.prefs.references,
              ref_reward_shift=3.0)
    assert np.abs(a.final_policy.logits - b.final_policy.logits).max() <= 1e-9
    np.testing.assert_allclose(a.column("objective") - 3.0, b.column("objective"), atol=1e-12)


def test_zero_reference_matches_no_reference_variant(small):
    a = train(small.world, small.head, small.prec, None, TrainConfig("advpo", steps=60),
              z_ref=np.zeros(small.world.dim))
    b = train(small.world, small.head, small.prec, None, TrainConfig("advpo_noref", steps=60))
    assert np.array_equal(a.final_policy.logits, b.final_policy.logits)


def test_non_finite_rewards_abort(small):
    bad = RewardHead(np.full(small.world.dim, 1e308), 0.0)
    with pytest.raises(NonFiniteEncountered) as info:
        train(small.world, bad, small.prec, None, TrainConfig("vanilla", steps=5))
    assert "step" in info.value.diagnostics
