"""Batched transition function of the supply-chain MOMDP.

Every state array carries a leading batch axis so that many independent episodes of
the same task advance in lock-step.  All functions are pure: they never mutate their
inputs and randomness is confined to the demand paths drawn at ``reset``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tasks import L_MAX, ScTask

PROFIT, EMISSION, INEQUALITY = 0, 1, 2
OBJECTIVE_NAMES = ("profit", "emission", "inequality")


class ActionBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class ScState:
    t: int
    inventory: np.ndarray  # (B, n_stock)
    pipeline: np.ndarray  # (B, n_edges, L_MAX); slot s arrives s + 1 periods from now
    cum_emission: np.ndarray  # (B,)
    avg_inequality: np.ndarray  # (B,)
    cum_demand: np.ndarray  # (B, n_markets)
    cum_fulfilled: np.ndarray  # (B, n_markets)
    demand: np.ndarray  # (B, T, n_markets) pre-drawn demand path

    @property
    def batch_size(self) -> int:
        return self.inventory.shape[0]

    def service_level(self) -> np.ndarray:
        return service_level(self.cum_demand, self.cum_fulfilled)


@dataclass(frozen=True)
class TransitionContext:
    shipments: np.ndarray  # (B, n_edges) dispatched this period after rationing
    arrivals: np.ndarray  # (B, n_edges) arriving this period
    manufactured: np.ndarray  # (B, n_mfg)
    inventory: np.ndarray  # (B, n_stock) end of period
    service_level: np.ndarray  # (B, n_markets) per retailer, market order


@dataclass(frozen=True)
class StepInfo:
    period: int
    demand: np.ndarray
    fulfilled: np.ndarray
    lost: np.ndarray
    rationing: np.ndarray  # (B, n_stock) outflow scale factor per shipping node
    shipments: np.ndarray
    arrivals: np.ndarray
    manufactured: np.ndarray
    departures: np.ndarray  # (B, n_stock) transport outflow per node
    inventory: np.ndarray
    service_level: np.ndarray


def service_level(cum_demand: np.ndarray, cum_fulfilled: np.ndarray) -> np.ndarray:
    """Cumulative fill rate; 1 while a market has seen no demand."""
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cum_demand > 0, cum_fulfilled / np.where(cum_demand > 0, cum_demand, 1.0), 1.0)


def seasonal_factor(task: ScTask, t) -> np.ndarray:
    return 1.0 + task.seasonal_amplitude * np.sin(2.0 * np.pi * np.asarray(t, dtype=float) / task.period)


def _draw(market, means, rng, size):
    if market.kind == "poisson":
        return rng.poisson(np.broadcast_to(means, size)).astype(float)
    draws = rng.normal(means, market.std, size=size)
    return np.rint(np.maximum(draws, 0.0))


def sample_demand(task: ScTask, t: int, market: int, rng: np.random.Generator) -> int:
    """One demand draw for ``market`` (0-based position in ``task.markets``) at period t."""
    if not 1 <= t <= task.horizon:
        raise ValueError(f"period {t} outside 1..{task.horizon}")
    m = task.markets[market]
    return int(_draw(m, m.mean * seasonal_factor(task, t), rng, None))


def demand_paths(task: ScTask, rng: np.random.Generator, n_envs: int) -> np.ndarray:
    periods = np.arange(1, task.horizon + 1)
    factor = seasonal_factor(task, periods)
    out = np.empty((n_envs, task.horizon, len(task.markets)))
    for z, m in enumerate(task.markets):
        out[:, :, z] = _draw(m, m.mean * factor, rng, (n_envs, task.horizon))
    return out


def reset(task: ScTask, episode_seed: int, n_envs: int = 1) -> ScState:
    rng = np.random.default_rng(episode_seed)
    n_stock, n_mkt = len(task.topology.stock_nodes), len(task.markets)
    return ScState(
        t=0,
        inventory=np.tile(task.init_inventory.astype(float), (n_envs, 1)),
        pipeline=np.zeros((n_envs, task.n_transport, L_MAX)),
        cum_emission=np.zeros(n_envs),
        avg_inequality=np.zeros(n_envs),
        cum_demand=np.zeros((n_envs, n_mkt)),
        cum_fulfilled=np.zeros((n_envs, n_mkt)),
        demand=demand_paths(task, rng, n_envs),
    )


def inequality(sl: np.ndarray) -> np.ndarray:
    """Half the sum over ordered pairs of absolute service-level differences."""
    diff = np.abs(sl[..., :, None] - sl[..., None, :])
    return 0.5 * diff.sum(axis=(-1, -2))


def compute_objectives(task: ScTask, ctx: TransitionContext) -> np.ndarray:
    """Per-period (profit, emission, inequality), shape (B, 3)."""
    idx = task.index
    L = task.lead_time
    revenue = ctx.arrivals @ idx.edge_price
    production = ctx.manufactured @ (task.mfg_cost / task.mfg_yield)
    transport = ctx.shipments @ (task.transport_cost * L)
    holding = ctx.inventory @ task.inv_cost
    emission = (ctx.inventory @ task.inv_emission
                + ctx.manufactured @ task.mfg_emission
                + ctx.shipments @ (task.transport_emission * L))
    return np.stack([revenue - production - transport - holding, emission,
                     inequality(ctx.service_level)], axis=-1)


def step(task: ScTask, state: ScState, action: np.ndarray) -> tuple[ScState, np.ndarray, StepInfo]:
    """Advance every episode in the batch by one period.

    ``action`` holds units, shape (B, action_dim): transport quantities in
    ``topology.transport_edges`` order followed by manufacturing quantities.
    """
    if state.t >= task.horizon:
        raise ValueError("episode already finished")
    action = np.atleast_2d(np.asarray(action, dtype=float))
    B, n_e = state.batch_size, task.n_transport
    if action.shape != (B, task.action_dim):
        raise ActionBoundsError(f"action shape {action.shape}, expected {(B, task.action_dim)}")
    upper = task.action_upper()
    if np.any(action < 0) or np.any(action > upper * (1 + 1e-12)) or not np.all(np.isfinite(action)):
        raise ActionBoundsError("action outside [0, Cap] x [0, mfg_cap]")
    idx = task.index
    ship, made = action[:, :n_e], action[:, n_e:]
    inv = state.inventory

    # proportional rationing; suppliers have unlimited stock
    requested = ship @ idx.src_onehot
    factor = np.ones_like(inv)
    short = requested > inv
    factor[short] = inv[short] / requested[short]
    edge_factor = np.where(idx.edge_src >= 0, factor[:, np.maximum(idx.edge_src, 0)], 1.0)
    ship = ship * edge_factor
    departures = ship @ idx.src_onehot
    inv = np.maximum(inv - departures, 0.0)
    inv[:, idx.mfg_pos] += made

    arrivals = state.pipeline[:, :, 0].copy()
    pipeline = np.zeros_like(state.pipeline)
    pipeline[:, :, :-1] = state.pipeline[:, :, 1:]
    pipeline[:, np.arange(n_e), task.lead_time - 1] += ship
    inv += arrivals @ idx.dst_onehot

    demand = state.demand[:, state.t, :]
    fulfilled = np.minimum(inv[:, idx.retailer_pos], demand)
    inv[:, idx.retailer_pos] -= fulfilled
    cum_demand = state.cum_demand + demand
    cum_fulfilled = state.cum_fulfilled + fulfilled
    sl = service_level(cum_demand, cum_fulfilled)

    ctx = TransitionContext(ship, arrivals, made, inv, sl)
    objectives = compute_objectives(task, ctx)
    t = state.t + 1
    nxt = ScState(
        t=t,
        inventory=inv,
        pipeline=pipeline,
        cum_emission=state.cum_emission + objectives[:, EMISSION],
        avg_inequality=(state.avg_inequality * (t - 1) + objectives[:, INEQUALITY]) / t,
        cum_demand=cum_demand,
        cum_fulfilled=cum_fulfilled,
        demand=state.demand,
    )
    info = StepInfo(t, demand, fulfilled, demand - fulfilled, factor, ship, arrivals, made,
                    departures, inv, sl)
    return nxt, objectives, info


def observe(task: ScTask, state: ScState) -> np.ndarray:
    """Layout: stock levels, pipeline slots per edge, cumulative emission, mean inequality, t/T."""
    B = state.batch_size
    return np.concatenate([
        state.inventory / task.index.inv_scale,
        state.pipeline.reshape(B, -1) / task.transport_cap,
        (state.cum_emission / task.emission_scale)[:, None],
        state.avg_inequality[:, None],
        np.full((B, 1), state.t / task.horizon),
    ], axis=1)


def random_rollout_totals(task: ScTask, n_episodes: int, seed: int) -> np.ndarray:
    """Episode-total (profit, emission, inequality) under random actions.

    Each episode draws an activity level u ~ U(0, 1) and then samples every action
    uniformly from [0, u * upper], so the batch spans idle through saturated operation.
    """
    rng = np.random.default_rng(seed)
    state = reset(task, int(rng.integers(2**63)), n_episodes)
    level = rng.uniform(0.0, 1.0, size=(n_episodes, 1))
    upper = task.action_upper()
    totals = np.zeros((n_episodes, 3))
    for _ in range(task.horizon):
        action = rng.uniform(0.0, 1.0, size=(n_episodes, task.action_dim)) * level * upper
        state, obj, _ = step(task, state, action)
        totals += obj
    return totals


def run_episode(task: ScTask, actions: np.ndarray, episode_seed: int) -> tuple[np.ndarray, list[StepInfo]]:
    """Replay a (T, action_dim) unit plan for a single episode; returns per-step objectives."""
    state = reset(task, episode_seed, 1)
    objs, infos = [], []
    for t in range(task.horizon):
        state, obj, info = step(task, state, actions[t][None, :])
        objs.append(obj[0])
        infos.append(info)
    return np.array(objs), infos
