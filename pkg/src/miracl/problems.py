"""Adapters that expose tasks to the learners as batched, unit-action environments.

A problem knows its dimensions, horizon and normalisation; ``make_env(n)`` returns an
environment that advances n episodes in lock-step.  ``env.step`` takes unit actions in
[0, 1] and returns the next observation plus the per-step normalised objective vector
(maximisation orientation), which sums over an episode to the unclamped normalised
episode return.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .env import ScTask, build_task, observe, reset, step
from .metrics import ObjectiveBounds, fit_bounds, normalize, orient
from .rng import child_seed


class ScVecEnv:
    def __init__(self, task: ScTask, bounds: ObjectiveBounds, n_envs: int):
        self.task, self.bounds, self.n_envs = task, bounds, n_envs
        self.horizon = task.horizon
        self.n_obj = 3
        self._low = np.asarray(bounds.low) / task.horizon
        self._span = bounds.span
        self.state = None
        self.raw_totals = np.zeros((n_envs, 3))
        self.infos = []

    def reset(self, seed: int) -> np.ndarray:
        self.state = reset(self.task, seed, self.n_envs)
        self.raw_totals = np.zeros((self.n_envs, 3))
        self.infos = []
        return observe(self.task, self.state)

    def step(self, unit_action: np.ndarray):
        units = self.task.scale_action(np.clip(unit_action, 0.0, 1.0))
        self.state, obj, info = step(self.task, self.state, units)
        self.raw_totals += obj
        self.infos.append(info)
        return observe(self.task, self.state), (orient(obj) - self._low) / self._span


@dataclass
class SupplyChainProblem:
    task: ScTask
    bounds: ObjectiveBounds
    task_id: str = ""

    @classmethod
    def from_task(cls, task: ScTask, bounds: ObjectiveBounds | None = None, bounds_episodes: int = 100,
                  bounds_seed: int = 0, task_id: str = "") -> "SupplyChainProblem":
        if bounds is None:
            bounds = fit_bounds(task, bounds_episodes, bounds_seed)
        return cls(task, bounds, task_id or f"{task.name}:{task.rng_seed}")

    @property
    def obs_dim(self) -> int:
        return self.task.obs_dim

    @property
    def act_dim(self) -> int:
        return self.task.action_dim

    @property
    def horizon(self) -> int:
        return self.task.horizon

    @property
    def n_obj(self) -> int:
        return 3

    def make_env(self, n_envs: int) -> ScVecEnv:
        return ScVecEnv(self.task, self.bounds, n_envs)

    def normalize(self, raw) -> np.ndarray:
        return normalize(raw, self.bounds)


@dataclass
class SupplyChainFamily:
    """Perturbed instances of one canonical network, each with its own fitted bounds."""

    complexity: str = "simple"
    perturb: bool = True
    bounds_episodes: int = 100
    horizon: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def sample(self, rng: np.random.Generator) -> SupplyChainProblem:
        return self.problem(child_seed(rng) % (2**31))

    def problem(self, task_seed: int) -> SupplyChainProblem:
        if task_seed not in self._cache:
            task = build_task(self.complexity, perturb=self.perturb, rng_seed=task_seed)
            if self.horizon is not None:
                task = replace(task, horizon=self.horizon)
            self._cache[task_seed] = SupplyChainProblem.from_task(
                task, bounds_episodes=self.bounds_episodes, bounds_seed=task_seed,
                task_id=f"{self.complexity}:{task_seed}")
            if len(self._cache) > 64:
                self._cache.pop(next(iter(self._cache)))
        return self._cache[task_seed]

    def probe(self) -> SupplyChainProblem:
        return self.problem(0)
