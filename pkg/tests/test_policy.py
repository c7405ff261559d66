import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from miracl.env import MarketDemand, micro_chain, run_episode
from miracl.metrics import ObjectiveBounds
from miracl.policy import (
    ACTION_OFFSET,
    PolicyLayout,
    PpoBatch,
    PpoHyper,
    adapt_kl_coef,
    forward,
    gae,
    gaussian_entropy,
    gaussian_logp,
    init_params,
    load_params,
    ppo_loss_and_grad,
    ppo_update,
    sample_action,
    save_params,
    scalarized_rollout,
    train_policy,
)
from miracl.problems import SupplyChainProblem
from oracles import ppo_gradcheck

TINY = PolicyLayout(4, 2, (8, 8))


def test_zero_params_give_zero_outputs():
    obs = np.random.default_rng(0).normal(size=(5, 4))
    mu, log_std, v = forward(TINY, TINY.zeros(), obs)
    np.testing.assert_array_equal(mu, 0.0)
    np.testing.assert_array_equal(v, 0.0)
    np.testing.assert_array_equal(log_std, 0.0)


def test_forward_deterministic_and_total():
    params = init_params(TINY, np.random.default_rng(1))
    obs = np.random.default_rng(2).normal(scale=100.0, size=(10_000, 4))
    a = forward(TINY, params, obs)
    b = forward(TINY, params, obs)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
        assert np.all(np.isfinite(x))
    with pytest.raises(ValueError):
        forward(TINY, params, np.zeros((1, 3)))
    with pytest.raises(ValueError):
        forward(TINY, params[:-1], np.zeros((1, 4)))


def test_init_layout():
    layout = PolicyLayout(25, 8)
    p = layout.unpack(init_params(layout, np.random.default_rng(0)))
    assert p["W0"].shape == (25, 64) and p["W1"].shape == (64, 64)
    np.testing.assert_allclose(p["log_std"], np.log(0.5))
    assert np.abs(p["Wmu"]).max() < 0.05


def test_sample_action_examples():
    rng = np.random.default_rng(0)
    unit, _, _ = sample_action(np.array([0.3, 0.7]), np.log(np.full(2, 1e-8)), rng)
    np.testing.assert_allclose(unit, [0.3, 0.7], atol=1e-6)
    unit, _, _ = sample_action(np.array([2.0, -1.0]), np.log(np.full(2, 1e-8)), rng)
    np.testing.assert_array_equal(unit, [1.0, 0.0])
    unit, x, logp = sample_action(np.full((100_000, 1), 0.5), np.log([0.1]), np.random.default_rng(1))
    assert abs(unit.mean() - 0.5) < 0.002
    np.testing.assert_allclose(logp, gaussian_logp(x, 0.5, np.log([0.1])))
    a = sample_action(np.full(3, 0.5), np.zeros(3), np.random.default_rng(9))
    b = sample_action(np.full(3, 0.5), np.zeros(3), np.random.default_rng(9))
    np.testing.assert_array_equal(a[0], b[0])


def test_gae_examples():
    adv, ret = gae([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 0.0, 0.99, 0.95, dones=[0, 0, 1])
    np.testing.assert_allclose(adv, [2.82504025, 1.9405, 1.0], atol=1e-9)
    assert adv[0] == pytest.approx(1 + 0.9405 * 1.9405, abs=1e-12)
    np.testing.assert_allclose(ret, adv)
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=6), rng.normal(size=6)
    adv0, _ = gae(r, v, 0.7, 0.9, 0.0)
    np.testing.assert_allclose(adv0, r + 0.9 * np.append(v[1:], 0.7) - v, atol=1e-12)
    adv_g0, _ = gae(r, v, 0.7, 0.0, 0.95)
    np.testing.assert_allclose(adv_g0, r - v, atol=1e-12)
    with pytest.raises(ValueError):
        gae([1.0, 2.0], [1.0], 0.0, 0.9, 0.9)


def test_gae_lambda_one_is_monte_carlo():
    rng = np.random.default_rng(3)
    for _ in range(20):
        T = int(rng.integers(1, 30))
        r, v = rng.normal(size=T), rng.normal(size=T)
        gamma = float(rng.uniform(0.5, 1.0))
        adv, _ = gae(r, v, 0.0, gamma, 1.0, dones=np.eye(T)[-1])
        mc = np.array([sum(gamma**l * r[t + l] for l in range(T - t)) for t in range(T)])
        np.testing.assert_allclose(adv, mc - v, rtol=0, atol=1e-9)


def test_gae_respects_episode_boundaries():
    r = np.array([[1.0, 0.0], [2.0, 1.0]])
    v = np.zeros((2, 2))
    both, _ = gae(r, v, 0.0, 0.5, 1.0, dones=np.array([[0, 0], [1, 1]]))
    np.testing.assert_allclose(both[:, 0], [2.0, 2.0])
    np.testing.assert_allclose(both[:, 1], [0.5, 1.0])
    split, _ = gae([1.0, 2.0], [0.0, 5.0], 0.0, 0.5, 1.0, dones=[1, 1])
    np.testing.assert_allclose(split, [1.0, -3.0])


def test_gradient_matches_finite_differences():
    for seed in range(5):
        assert ppo_gradcheck(seed) < 1e-4


def _batch(rng, layout, params, n=8):
    obs = rng.normal(size=(n, layout.obs_dim))
    mu, ls, _ = forward(layout, params, obs)
    x = mu + ACTION_OFFSET + np.exp(ls) * rng.normal(size=mu.shape)
    return PpoBatch(obs, x, gaussian_logp(x, mu + ACTION_OFFSET, ls), mu, ls,
                    rng.normal(size=n), rng.normal(size=n))


def test_ppo_clip_zeroes_policy_gradient():
    rng = np.random.default_rng(4)
    params = init_params(TINY, rng)
    b = _batch(rng, TINY, params, n=1)
    # old log-prob far below the current one: ratio >> 1 + clip with positive advantage
    b = dataclasses.replace(b, logp=b.logp - 5.0, advantages=np.array([1.0]))
    _, grad, stats = ppo_loss_and_grad(TINY, params, b, 0.2, 0.0, 0.0, 0.0)
    assert stats["clip_fraction"] == 1.0
    np.testing.assert_array_equal(grad, 0.0)
    # same sample with a negative advantage takes the unclipped branch
    b = dataclasses.replace(b, advantages=np.array([-1.0]))
    _, grad, _ = ppo_loss_and_grad(TINY, params, b, 0.2, 0.0, 0.0, 0.0)
    assert np.abs(grad).max() > 0


def test_ppo_update_no_ops():
    rng = np.random.default_rng(5)
    params = init_params(TINY, rng)
    b = _batch(rng, TINY, params, n=32)
    out, diag = ppo_update(TINY, params, b, PpoHyper(lr=0.0, minibatch_size=8), rng)
    np.testing.assert_array_equal(out, params)
    assert diag["error"] is None
    zero = dataclasses.replace(b, advantages=np.zeros(32))
    hyper = PpoHyper(lr=1e-2, vf_coef=0.0, kl_coef=0.0, ent_coef=0.0, minibatch_size=8)
    out, _ = ppo_update(TINY, params, zero, hyper, rng)
    np.testing.assert_array_equal(out, params)
    _, grad, _ = ppo_loss_and_grad(TINY, params, zero, 0.2, 0.0, 0.0, 0.0)
    np.testing.assert_array_equal(grad, 0.0)


def test_ppo_update_nan_aborts():
    rng = np.random.default_rng(6)
    params = init_params(TINY, rng)
    b = _batch(rng, TINY, params)
    b = dataclasses.replace(b, returns=np.full(len(b), np.nan))
    out, diag = ppo_update(TINY, params, b, PpoHyper(normalize_advantages=False), rng)
    np.testing.assert_array_equal(out, params)
    assert diag["error"]
    with pytest.raises(ValueError):
        ppo_update(TINY, params, b.take(np.array([], dtype=int)), PpoHyper(), rng)


def test_ppo_update_improves_surrogate():
    rng = np.random.default_rng(7)
    params = init_params(TINY, rng)
    b = _batch(rng, TINY, params, n=64)
    hyper = PpoHyper(lr=1e-2, epochs=4, minibatch_size=16, vf_coef=0.0, normalize_advantages=False)
    before = ppo_loss_and_grad(TINY, params, b, 0.2, 0.0, 0.0, 0.0)[0]
    out, diag = ppo_update(TINY, params, b, hyper, rng)
    assert ppo_loss_and_grad(TINY, out, b, 0.2, 0.0, 0.0, 0.0)[0] < before
    assert diag["kl"] >= 0.0


def test_kl_coefficient_rule():
    assert adapt_kl_coef(0.1, 0.05, 0.01) == 0.2
    assert adapt_kl_coef(0.1, 0.001, 0.01) == 0.05
    assert adapt_kl_coef(0.1, 0.01, 0.01) == 0.1


@given(st.floats(-5, 5), st.floats(0.01, 3))
def test_entropy_increasing_in_log_std(ls, step):
    assert gaussian_entropy(np.array([ls + step])) > gaussian_entropy(np.array([ls]))


def test_params_round_trip(tmp_path):
    params = init_params(TINY, np.random.default_rng(0))
    save_params(tmp_path / "p.bin", TINY, params)
    layout, back = load_params(tmp_path / "p.bin")
    assert layout == TINY
    np.testing.assert_array_equal(back, params)
    (tmp_path / "bad.bin").write_bytes(b"nope" + bytes(40))
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.bin")


def micro_problem():
    task = micro_chain(horizon=5, transport_cost=(0.5, 0.5), mfg_cost=2.0, inv_cost=(0.1, 0.1),
                       inv_emission=(0.01, 0.01), mfg_emission=0.5,
                       demand=MarketDemand("normal", 60.0, 10.0, 20.0))
    bounds = ObjectiveBounds((-5000.0, -2000.0, -1.0), (5000.0, 0.0, 1.0))
    return SupplyChainProblem.from_task(task, bounds)


def test_rollout_replay_oracle():
    prob = micro_problem()
    layout = PolicyLayout(prob.obs_dim, prob.act_dim, (8, 8))
    params = layout.zeros()
    layout.unpack(params)["log_std"][...] = -30.0  # sigma floor: actions sit at the offset
    rng = np.random.default_rng(3)
    episode_seed = int(np.random.default_rng(3).integers(2**63 - 1))
    batch = scalarized_rollout(prob.make_env(1), layout, params, [1, 0, 0], rng)
    actions = np.clip(batch.actions[:, 0, :], 0.0, 1.0)
    np.testing.assert_allclose(actions, 0.5, atol=1e-9)
    objs, _ = run_episode(prob.task, prob.task.scale_action(actions), episode_seed)
    np.testing.assert_array_equal(batch.raw_totals[0], objs.sum(axis=0))


def test_rollout_scalarisation_and_determinism():
    prob = micro_problem()
    layout = PolicyLayout(prob.obs_dim, prob.act_dim, (8, 8))
    params = init_params(layout, np.random.default_rng(0))
    a = scalarized_rollout(prob.make_env(3), layout, params, [1, 0, 0], np.random.default_rng(5))
    b = scalarized_rollout(prob.make_env(3), layout, params, [1, 0, 0], np.random.default_rng(5))
    np.testing.assert_array_equal(a.rewards, b.rewards)
    np.testing.assert_allclose(a.episode_returns, a.normalized_totals[:, 0], atol=1e-12)
    raw_norm = (a.raw_totals * [1, -1, -1] - prob.bounds.low) / prob.bounds.span
    np.testing.assert_allclose(a.normalized_totals, raw_norm, atol=1e-12)
    assert a.n_steps == 15
    t = scalarized_rollout(prob.make_env(3), layout, params, [0.5, 0.5, 0.0], np.random.default_rng(5),
                           "tchebycheff")
    np.testing.assert_array_equal(t.rewards[:-1], 0.0)
    expected = -np.max([0.5, 0.5, 0.0] * (1 - t.normalized_totals), axis=1)
    np.testing.assert_allclose(t.rewards[-1], expected)


def test_train_policy_budget():
    prob = micro_problem()
    layout = PolicyLayout(prob.obs_dim, prob.act_dim, (8, 8))
    params = init_params(layout, np.random.default_rng(0))
    hyper = PpoHyper(n_steps=20, minibatch_size=10, epochs=2)
    res = train_policy(prob, layout, params, [1, 0, 0], 47, hyper, np.random.default_rng(1))
    assert res.env_steps == 45 and len(res.log) == 3
    res0 = train_policy(prob, layout, params, [1, 0, 0], 4, hyper, np.random.default_rng(1))
    assert res0.env_steps == 0
    np.testing.assert_array_equal(res0.params, params)
