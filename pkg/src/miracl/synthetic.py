"""Two-objective quadratic bandit family for fast checks of the meta-learning machinery.

Each task has centres c in [-1, 1]^2.  A unit action u maps to a = 2u - 1 and earns
(-(a - c1)^2, -(a - c2)^2).  Episodes last one step with a constant observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QuadraticEnv:
    def __init__(self, centers: np.ndarray, n_envs: int):
        self.centers, self.n_envs = centers, n_envs
        self.horizon = 1
        self.n_obj = 2
        self.raw_totals = np.zeros((n_envs, 2))

    def reset(self, seed: int) -> np.ndarray:
        self.raw_totals = np.zeros((self.n_envs, 2))
        return np.ones((self.n_envs, 1))

    def step(self, unit_action: np.ndarray):
        a = 2.0 * np.clip(unit_action[:, 0], 0.0, 1.0) - 1.0
        r = -((a[:, None] - self.centers[None, :]) ** 2)
        self.raw_totals += r
        return np.ones((self.n_envs, 1)), r


@dataclass
class QuadraticProblem:
    centers: np.ndarray
    task_id: str = ""
    obs_dim: int = 1
    act_dim: int = 1
    horizon: int = 1
    n_obj: int = 2

    def make_env(self, n_envs: int) -> QuadraticEnv:
        return QuadraticEnv(np.asarray(self.centers, dtype=float), n_envs)

    def normalize(self, raw) -> np.ndarray:
        return np.asarray(raw, dtype=float)

    def optimum(self, weight) -> float:
        """Best achievable linear-scalarised return for ``weight``."""
        w, c = np.asarray(weight, dtype=float), np.asarray(self.centers, dtype=float)
        a = float(np.clip(w @ c / w.sum(), -1.0, 1.0))
        return float(-(w @ (a - c) ** 2))


@dataclass
class QuadraticFamily:
    low: float = -1.0
    high: float = 1.0

    def sample(self, rng: np.random.Generator) -> QuadraticProblem:
        c = rng.uniform(self.low, self.high, size=2)
        return QuadraticProblem(c, task_id=f"quad:{c[0]:.4f},{c[1]:.4f}")

    def probe(self) -> QuadraticProblem:
        return QuadraticProblem(np.zeros(2), task_id="quad:probe")
