import dataclasses

import numpy as np
import pytest

from miracl.meta import (
    MetaConfig,
    estimate_metagrad_variance,
    generate_weights,
    inner_adapt,
    meta_train,
    meta_update,
    subproblem_gradient,
)
from miracl.metrics import ParetoArchive, dominates
from miracl.policy import PolicyLayout, init_params, load_params, scalarized_rollout
from miracl.rng import stream
from miracl.scalarize import sample_simplex_weights
from miracl.synthetic import QuadraticFamily, QuadraticProblem

FAM = QuadraticFamily()
LAYOUT = PolicyLayout(1, 1, (16, 16))
FAST = dict(k=3, adapt_steps=2, rollout_steps=16, outer_steps=2, hidden=(16, 16))


def _adapted(seed, cfg, n=1, same=False):
    rng = np.random.default_rng(seed)
    theta = init_params(LAYOUT, rng)
    prob = FAM.sample(rng)
    out = []
    for k in range(n):
        r = np.random.default_rng(seed if same else seed + k + 1)
        w = np.array([0.3, 0.7]) if same else rng.dirichlet([1, 1])
        a = inner_adapt(prob, LAYOUT, theta, w, cfg, r)
        out.append((a.params, a.batch))
    return theta, out


def test_inner_adapt_no_ops():
    cfg = MetaConfig(alpha=0.0, **FAST)
    rng = np.random.default_rng(0)
    theta = init_params(LAYOUT, rng)
    a = inner_adapt(FAM.sample(rng), LAYOUT, theta, [0.5, 0.5], cfg, rng)
    np.testing.assert_array_equal(a.params, theta)
    cfg = MetaConfig(**FAST)
    a = inner_adapt(FAM.sample(rng), LAYOUT, theta, [0.5, 0.5], cfg, rng, n_steps=0)
    np.testing.assert_array_equal(a.params, theta)
    assert a.env_steps == 16


def test_inner_adapt_improves_on_quadratic_family():
    cfg = MetaConfig(adapt_steps=4, rollout_steps=32)
    layout = PolicyLayout(1, 1)
    wins = 0
    for s in range(50):
        rng = np.random.default_rng(s)
        prob, w = FAM.sample(rng), rng.dirichlet([1, 1])
        theta = init_params(layout, rng)
        a = inner_adapt(prob, layout, theta, w, cfg, rng)

        def expected(p):
            env = prob.make_env(4096)
            return scalarized_rollout(env, layout, p, w, np.random.default_rng(1000 + s)).episode_returns.mean()

        wins += expected(a.params) > expected(theta)
    assert wins >= 45


def test_meta_update_beta_zero():
    cfg = MetaConfig(**FAST)
    theta, adapted = _adapted(1, cfg, n=3)
    out, _, skipped = meta_update(LAYOUT, theta, adapted, 0.0, cfg, 3)
    np.testing.assert_array_equal(out, theta)
    assert not skipped


def test_meta_update_single_subproblem_moves_by_minus_beta_g():
    cfg = MetaConfig(max_grad_norm=None, **FAST)
    theta, adapted = _adapted(2, cfg, n=1)
    g = subproblem_gradient(LAYOUT, adapted[0][0], adapted[0][1], cfg)
    out, first, _ = meta_update(LAYOUT, theta, adapted, 0.01, cfg, 1)
    np.testing.assert_allclose(out, theta - 0.01 * g, rtol=0, atol=1e-12)
    np.testing.assert_allclose(first, g, rtol=0, atol=1e-12)


def test_meta_update_direction_is_mean_gradient():
    cfg = MetaConfig(**FAST)
    theta, adapted = _adapted(3, cfg, n=4)
    grads = [subproblem_gradient(LAYOUT, theta + (p - theta), b, cfg) for p, b in adapted]
    _, first, _ = meta_update(LAYOUT, theta, adapted, 0.01, cfg, 1)
    np.testing.assert_allclose(first, np.mean(grads, axis=0), rtol=0, atol=1e-9)


def test_identical_subproblems_match_single():
    cfg = MetaConfig(**FAST)
    theta, one = _adapted(4, cfg, n=1, same=True)
    _, four = _adapted(4, cfg, n=4, same=True)
    a, _, _ = meta_update(LAYOUT, theta, one, 0.01, cfg, 2)
    b, _, _ = meta_update(LAYOUT, theta, four, 0.01, cfg, 2)
    np.testing.assert_array_equal(a, b)


def test_meta_update_skips_non_finite():
    cfg = MetaConfig(**FAST)
    theta, adapted = _adapted(5, cfg, n=2)
    bad = dataclasses.replace(adapted[0][1], returns=np.full_like(adapted[0][1].returns, np.nan))
    out, _, skipped = meta_update(LAYOUT, theta, [(adapted[0][0], bad)], 0.01, cfg, 1)
    assert skipped
    np.testing.assert_array_equal(out, theta)
    with pytest.raises(ValueError):
        meta_update(LAYOUT, theta, [], 0.01, cfg)


def _archive(rng, n=6):
    a = ParetoArchive()
    for w in rng.dirichlet(np.ones(3), n):
        a.insert(np.sqrt(w), weight=w)
    return a


def test_generate_weights_cases():
    empty = generate_weights(ParetoArchive(), 5, np.random.default_rng(0), 0.05)
    np.testing.assert_array_equal(empty, sample_simplex_weights(5, 3, np.random.default_rng(0)))
    arch = _archive(np.random.default_rng(1))
    flat = generate_weights(arch, 5, np.random.default_rng(0), 0.0)
    np.testing.assert_array_equal(flat, empty)
    moved = generate_weights(arch, 5, np.random.default_rng(0), 0.05)
    assert not np.array_equal(moved, empty)


def test_generate_weights_simplex_fuzz():
    rng = np.random.default_rng(2)
    for _ in range(500):
        arch = _archive(rng, int(rng.integers(1, 8)))
        w = generate_weights(arch, 20, rng, float(rng.uniform(0, 0.5)))
        np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)
        assert w.min() >= 0.0


def test_budget_smaller_than_one_iteration():
    cfg = MetaConfig(budget=10, **FAST)
    res = meta_train(FAM, cfg, seed=3)
    assert res.iterations == 0 and res.env_steps == 0
    np.testing.assert_array_equal(res.params, init_params(res.layout, stream(3, "policy-init")))


def test_meta_train_deterministic_and_archive_valid(tmp_path):
    cfg = MetaConfig(budget=10_000, max_iterations=6, checkpoint_every=3, **FAST)
    a = meta_train(FAM, cfg, seed=7, out_dir=tmp_path)
    b = meta_train(FAM, cfg, seed=7)
    np.testing.assert_array_equal(a.params, b.params)
    strip = lambda log: [{k: v for k, v in r.items() if k != "wall_clock"} for r in log]  # noqa: E731
    assert strip(a.log) == strip(b.log)
    assert a.iterations == 6 and a.env_steps == 6 * cfg.steps_per_iteration(1)
    pts = a.archive.points
    assert not any(dominates(pts[i], pts[j]) for i in range(len(pts)) for j in range(len(pts)))
    assert (tmp_path / "train_log.csv").exists()
    for tag in ("iter000003", "iter000006", "final"):
        assert (tmp_path / "checkpoints" / tag / "params.bin").exists()
    layout, params = load_params(tmp_path / "checkpoints" / "final" / "params.bin")
    np.testing.assert_array_equal(params, a.params)
    assert not np.array_equal(a.params, init_params(a.layout, stream(7, "policy-init")))


def test_psa_disabled_modes_coincide():
    base = dict(budget=10_000, max_iterations=4, **FAST)
    a = meta_train(FAM, MetaConfig(mode="miracl", psa_steps=0, **base), seed=1)
    b = meta_train(FAM, MetaConfig(mode="meta-morl", shared_task=True, **base), seed=1)
    np.testing.assert_array_equal(a.params, b.params)


def test_meta_morl_weights_are_dirichlet():
    cfg = MetaConfig(mode="meta-morl", k=10, adapt_steps=0, rollout_steps=1, outer_steps=1,
                     hidden=(2,), budget=10**9, max_iterations=1000)
    res = meta_train(FAM, cfg, seed=0)
    w = np.array([row["weights"] for row in res.log]).reshape(-1, 2)
    assert len(w) == 10_000
    np.testing.assert_allclose(w.sum(1), 1.0)
    assert np.all(np.abs(w.mean(0) - 0.5) < 0.01)
    assert abs(np.corrcoef(w[:-10, 0], w[10:, 0])[0, 1]) < 0.05


def test_variance_diagnostic_contract():
    cfg = MetaConfig(adapt_steps=1, rollout_steps=8, hidden=(8,))
    layout = PolicyLayout(1, 1, (8,))
    theta = init_params(layout, np.random.default_rng(0))
    with pytest.raises(ValueError):
        estimate_metagrad_variance(layout, theta, FAM, 2, 2, 1, 0, cfg)
    sharp = theta.copy()
    layout.unpack(sharp)["log_std"][...] = -30.0
    task = QuadraticProblem(np.array([0.2, -0.4]))
    out = estimate_metagrad_variance(layout, sharp, FAM, 2, 2, 5, 0, cfg, n_tasks=1, fixed_task=task,
                                     fixed_weight=[0.4, 0.6], common_random_numbers=True)
    assert out["meta_total"] == 0.0 and out["miracl_total"] == 0.0 and out["miracl_within"] == 0.0
    out = estimate_metagrad_variance(layout, theta, FAM, 2, 2, 5, 0, cfg, n_tasks=2)
    assert out["miracl_within"] > 0 and len(out["miracl_within_per_task"]) == 2


def test_variance_k1_b1_estimators_agree():
    cfg = MetaConfig(adapt_steps=1, rollout_steps=8, hidden=(8,))
    layout = PolicyLayout(1, 1, (8,))
    theta = init_params(layout, np.random.default_rng(0))
    out = estimate_metagrad_variance(layout, theta, FAM, 1, 1, 300, 0, cfg, n_tasks=1)
    assert 0.7 < out["meta_total"] / out["miracl_total"] < 1.4
