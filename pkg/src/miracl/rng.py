"""Named random streams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("env", "policy-init", "weights", "psa", "nsga2", "rollout", "eval", "tasks")


def seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, extra)])


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for substream ``name`` (optionally further keyed by integers)."""
    return np.random.default_rng(seed_sequence(seed, name, *extra))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
