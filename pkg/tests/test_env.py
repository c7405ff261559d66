import dataclasses

import numpy as np
import pytest

from miracl.env import (
    ActionBoundsError,
    MarketDemand,
    NetworkTopology,
    ScTask,
    build_task,
    compute_objectives,
    inequality,
    load_task,
    micro_chain,
    observe,
    reset,
    run_episode,
    sample_demand,
    save_task,
    step,
    write_traces,
)
from miracl.env.sim import TransitionContext


def hand_chain():
    return micro_chain(lead_time=1, transport_cost=(0.5, 0.5), transport_emission=(0.1, 0.2),
                       inv_cost=(0.1, 0.2), inv_emission=(0.01, 0.02), mfg_cost=2.0,
                       mfg_emission=0.5, demand=MarketDemand("normal", 8.0, 0.0, 20.0))


HAND_PLAN = np.array([[5.0, 0.0, 10.0], [0.0, 12.0, 0.0], [0.0, 0.0, 0.0]])


def test_micro_chain_three_period_episode():
    # t1: buy 5, make 10 | t2: ship 12 requested, rationed to 10 | t3: 10 arrive, 8 sold
    objs, infos = run_episode(hand_chain(), HAND_PLAN, episode_seed=0)
    np.testing.assert_allclose(objs[:, 0], [-23.5, -5.5, 199.1], rtol=0, atol=1e-9)
    np.testing.assert_allclose(objs[:, 1], [5.6, 2.05, 0.09], rtol=0, atol=1e-9)
    np.testing.assert_allclose(objs[:, 2], 0.0, atol=1e-12)
    assert abs(objs[:, 0].sum() - 170.1) < 1e-9
    assert abs(objs[:, 1].sum() - 7.74) < 1e-9
    assert infos[1].shipments[0, 1] == pytest.approx(10.0)
    assert infos[1].rationing[0, 0] == pytest.approx(10.0 / 12.0)
    np.testing.assert_allclose(infos[-1].inventory[0], [5.0, 2.0])
    np.testing.assert_allclose(infos[-1].service_level[0], [8.0 / 24.0])


def two_retailer_task(horizon=3):
    topo = NetworkTopology(layers=((1,), (2,), (3, 4), (5, 6)),
                           transport_edges=((1, 2), (2, 3), (2, 4)),
                           manufacturer_ids=(2,), retailer_to_market={3: 5, 4: 6})
    demand = MarketDemand("normal", 5.0, 0.0, 20.0)
    return ScTask(name="two-retailer", topology=topo, init_inventory=np.array([0.0, 10.0, 0.0]),
                  inv_cost=np.array([0.0, 0.1, 0.1]), inv_emission=np.array([0.0, 0.2, 0.2]),
                  mfg_cost=np.array([0.0]), mfg_yield=np.array([1.0]), mfg_emission=np.array([0.0]),
                  transport_cost=np.zeros(3), transport_emission=np.zeros(3),
                  lead_time=np.array([1, 1, 1]), markets=(demand, demand), horizon=horizon,
                  seasonal_amplitude=0.0)


def test_two_retailer_inequality_episode():
    # retailer 3 sells 5, 5, 0 from its stock of 10; retailer 4 has nothing
    objs, _ = run_episode(two_retailer_task(), np.zeros((3, 4)), episode_seed=0)
    np.testing.assert_allclose(objs[:, 2], [1.0, 1.0, 2.0 / 3.0], atol=1e-12)
    np.testing.assert_allclose(objs[:, 0], [-0.5, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(objs[:, 1], [1.0, 0.0, 0.0], atol=1e-12)


def test_transport_cost_example():
    task = micro_chain(init_inventory=(10.0, 0.0), transport_cost=(0.0, 0.5))
    state = reset(task, 0)
    _, obj, _ = step(task, state, np.array([[0.0, 10.0, 0.0]]))
    assert obj[0, 0] == pytest.approx(-5.0)


def test_profit_example():
    task = micro_chain(mfg_cost=2.0, demand=MarketDemand("normal", 0.0, 0.0, 20.0))
    ctx = TransitionContext(shipments=np.zeros((1, 2)), arrivals=np.array([[0.0, 10.0]]),
                            manufactured=np.array([[10.0]]), inventory=np.zeros((1, 2)),
                            service_level=np.ones((1, 1)))
    assert compute_objectives(task, ctx)[0, 0] == pytest.approx(180.0)


def test_inequality_examples():
    assert inequality(np.array([0.8, 0.6])) == pytest.approx(0.2)
    assert inequality(np.array([1.0, 0.5, 0.0])) == pytest.approx(2.0)


def test_zero_action_zero_objectives():
    task = micro_chain()
    objs, _ = run_episode(task, np.zeros((3, 3)), 0)
    # demand is 0 by default in the micro chain, so service level stays 1
    np.testing.assert_array_equal(objs, 0.0)


@pytest.mark.parametrize("complexity", ["simple", "moderate", "complex"])
def test_flow_conservation_and_nonnegativity(complexity):
    task = build_task(complexity, perturb=True, rng_seed=3)
    rng = np.random.default_rng(11)
    n_envs = 34  # 34 envs x 100 periods per task, ~10^4 steps over the three tasks
    state = reset(task, 5, n_envs)
    idx = task.index
    inv0 = state.inventory.copy()
    arrived = np.zeros_like(inv0)
    departed = np.zeros_like(inv0)
    made = np.zeros_like(inv0)
    sold = np.zeros_like(inv0)
    cum_e = np.zeros(n_envs)
    f_hist = []
    for _ in range(task.horizon):
        action = rng.uniform(0, 1, (n_envs, task.action_dim)) * task.action_upper()
        state, obj, info = step(task, state, action)
        assert np.all(state.inventory >= 0)
        arrived += info.arrivals @ idx.dst_onehot
        departed += info.departures
        made[:, idx.mfg_pos] += info.manufactured
        sold[:, idx.retailer_pos] += info.fulfilled
        cum_e += obj[:, 1]
        f_hist.append(obj[:, 2])
        np.testing.assert_array_equal(state.cum_emission, cum_e)
        np.testing.assert_allclose(state.avg_inequality, np.mean(f_hist, axis=0), rtol=0, atol=1e-9)
    expected = inv0 + arrived - departed + made - sold
    np.testing.assert_allclose(state.inventory, expected, rtol=1e-12, atol=1e-9)


def test_determinism():
    task = build_task("simple", perturb=True, rng_seed=4)
    plan = np.random.default_rng(0).uniform(0, 1, (task.horizon, task.action_dim)) * task.action_upper()
    a, _ = run_episode(task, plan, 9)
    b, _ = run_episode(task, plan, 9)
    np.testing.assert_array_equal(a, b)
    s1, s2 = reset(task, 9, 2), reset(task, 9, 2)
    for f in dataclasses.fields(s1):
        np.testing.assert_array_equal(getattr(s1, f.name), getattr(s2, f.name))


def test_action_bounds_rejected():
    task = micro_chain()
    state = reset(task, 0)
    with pytest.raises(ActionBoundsError):
        step(task, state, np.array([[-1.0, 0.0, 0.0]]))
    with pytest.raises(ActionBoundsError):
        step(task, state, np.array([[0.0, 0.0, 1e9]]))
    with pytest.raises(ActionBoundsError):
        step(task, state, np.zeros((1, 2)))


def test_build_task_examples():
    simple = build_task("simple", perturb=False, rng_seed=0)
    np.testing.assert_allclose(simple.mfg_cost, [2.0, 2.2])
    np.testing.assert_allclose(simple.mfg_yield, [1.0, 1.0])
    assert [m.mean for m in simple.markets] == [150.0, 100.0]
    moderate = build_task("moderate", perturb=False)
    assert moderate.n_transport == 18
    assert moderate.action_dim == 21
    complex_ = build_task("complex")
    assert [m.kind for m in complex_.markets] == ["normal", "normal", "poisson", "poisson", "poisson"]
    assert [m.mean for m in complex_.markets[2:]] == [200.0, 100.0, 150.0]
    with pytest.raises(ValueError):
        build_task("huge")


def test_perturbed_task_deterministic():
    a = build_task("simple", perturb=True, rng_seed=21)
    b = build_task("simple", perturb=True, rng_seed=21)
    c = build_task("simple", perturb=True, rng_seed=22)
    np.testing.assert_array_equal(a.inv_cost, b.inv_cost)
    np.testing.assert_array_equal(a.lead_time, b.lead_time)
    assert a.markets == b.markets
    assert not np.array_equal(a.inv_cost, c.inv_cost)


def test_reset_examples():
    task = build_task("simple")
    state = reset(task, 0)
    assert 380 in state.inventory[0] and 350 in state.inventory[0]
    assert state.cum_emission[0] == 0.0


def test_sample_demand_mean():
    task = dataclasses.replace(build_task("simple"), seasonal_amplitude=0.0)
    rng = np.random.default_rng(123)
    draws = np.array([sample_demand(task, 1 + i % task.horizon, 0, rng) for i in range(100_000)])
    # E[max(X, 0)] for X ~ N(150, 60): mu * Phi(2.5) + sigma * phi(2.5)
    oracle = 150.0 * 0.9937903346742238 + 60.0 * 0.01752830049356854
    assert abs(draws.mean() - oracle) < 2.0
    assert abs(draws.mean() - 150.0) < 2.0
    assert np.all(draws >= 0) and np.all(draws == np.rint(draws))


def test_sample_demand_degenerate_and_bounds():
    task = micro_chain(demand=MarketDemand("normal", 37.0, 0.0, 1.0), horizon=5)
    rng = np.random.default_rng(0)
    assert [sample_demand(task, t, 0, rng) for t in range(1, 6)] == [37] * 5
    with pytest.raises(ValueError):
        sample_demand(task, 0, 0, rng)
    with pytest.raises(ValueError):
        sample_demand(task, 6, 0, rng)


def test_observe_examples():
    task = micro_chain(horizon=3)
    obs = observe(task, reset(task, 0))
    assert obs.shape == (1, task.obs_dim)
    np.testing.assert_array_equal(obs, 0.0)
    # inventory 100 with scale 200 (transport capacity) -> 0.5
    stocked = micro_chain(init_inventory=(100.0, 0.0))
    assert observe(stocked, reset(stocked, 0))[0, 0] == pytest.approx(0.5)
    assert build_task("moderate").obs_dim == 65
    state, _, _ = step(task, reset(task, 0), np.zeros((1, 3)))
    assert observe(task, state)[0, -1] == pytest.approx(1.0 / 3.0)


def test_task_yaml_round_trip(tmp_path):
    task = build_task("moderate", perturb=True, rng_seed=5)
    save_task(task, tmp_path / "t.yaml")
    back = load_task(tmp_path / "t.yaml")
    for name in ("init_inventory", "inv_cost", "mfg_cost", "transport_cost", "lead_time"):
        np.testing.assert_array_equal(getattr(task, name), getattr(back, name))
    assert back.markets == task.markets
    assert back.emission_scale == task.emission_scale
    plan = np.full((task.horizon, task.action_dim), 10.0)
    np.testing.assert_array_equal(run_episode(task, plan, 1)[0], run_episode(back, plan, 1)[0])


def test_write_traces(tmp_path):
    objs, infos = run_episode(hand_chain(), HAND_PLAN, 0)
    paths = write_traces(hand_chain(), infos, tmp_path)
    rows = (tmp_path / "manufacturing.csv").read_text().splitlines()
    assert rows[0] == "period,node,units"
    assert sum(float(r.split(",")[2]) for r in rows[1:]) == 10.0
    assert len(paths) == 3


def test_topology_validation():
    with pytest.raises(ValueError):
        NetworkTopology(layers=((1,), (2,), (3,), (4,)), transport_edges=((1, 3),),
                        manufacturer_ids=(2,), retailer_to_market={3: 4})
    with pytest.raises(ValueError):
        NetworkTopology(layers=((1,), (2,), (3,), (4,)), transport_edges=((1, 2),),
                        manufacturer_ids=(2,), retailer_to_market={})
