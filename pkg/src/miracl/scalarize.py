"""Scalarisation, simplex weights and the Pareto-simulated-annealing weight rule."""

from __future__ import annotations

import numpy as np

from .metrics import ParetoArchive, dominates

WEIGHT_FLOOR = 1e-6


def _check_dims(w, r):
    w, r = np.asarray(w, dtype=float), np.asarray(r, dtype=float)
    if w.shape[-1] != r.shape[-1]:
        raise ValueError(f"weight has {w.shape[-1]} components, reward has {r.shape[-1]}")
    return w, r


def linear_scalarize(w, r) -> np.ndarray | float:
    w, r = _check_dims(w, r)
    return np.sum(w * r, axis=-1)


def tchebycheff_scalarize(w, r, utopia=None) -> np.ndarray | float:
    """Negated weighted Chebyshev distance to the utopia point (larger is better)."""
    w, r = _check_dims(w, r)
    z = np.ones(r.shape[-1]) if utopia is None else np.asarray(utopia, dtype=float)
    return -np.max(w * (z - r), axis=-1)


def sample_simplex_weights(k: int, d: int, rng: np.random.Generator) -> np.ndarray:
    if k < 1 or d < 2:
        raise ValueError("need k >= 1 and d >= 2")
    return rng.dirichlet(np.ones(d), size=k)


def psa_update_step(w, r, r_prime, delta: float) -> np.ndarray:
    """Boost w_j by (1 + delta) where r_j >= r'_j, shrink it elsewhere, then renormalise."""
    if delta < 0:
        raise ValueError("PSA rate must be non-negative")
    w = np.asarray(w, dtype=float)
    if delta == 0:
        return w.copy()
    r, r_prime = np.asarray(r, dtype=float), np.asarray(r_prime, dtype=float)
    if not (w.shape == r.shape == r_prime.shape):
        raise ValueError("weight and rewards must share a shape")
    scaled = np.where(r >= r_prime, w * (1.0 + delta), w / (1.0 + delta))
    scaled = np.maximum(scaled, WEIGHT_FLOOR)
    return scaled / scaled.sum()


def diversity_mechanism(task_id: str, weights, rewards, archive: ParetoArchive, steps: int,
                        delta: float, policy_ids=None, raw=None,
                        exclude_self: bool = False) -> tuple[np.ndarray, ParetoArchive]:
    """Adapt each weight against its nearest archived reward, then grow the archive.

    The archive is mutated in place and also returned.  ``rewards`` are normalised
    points in maximisation orientation.  With ``exclude_self`` an archived point equal
    to r_k is not eligible as its neighbour.
    """
    w = np.array(weights, dtype=float)
    r = np.asarray(rewards, dtype=float)
    if len(w) == 0:
        raise ValueError("diversity mechanism needs at least one subproblem")
    if len(w) != len(r):
        raise ValueError("weights and rewards must have the same length")
    if archive and delta > 0:
        for _ in range(steps):
            for k in range(len(w)):
                j = archive.nearest(r[k], exclude_exact=exclude_self)
                if j is not None:
                    w[k] = psa_update_step(w[k], r[k], archive.entries[j].point, delta)
    for k in range(len(r)):
        if not any(dominates(r[i], r[k]) for i in range(len(r)) if i != k):
            archive.insert(r[k], task_id=task_id, weight=w[k],
                           policy_id="" if policy_ids is None else str(policy_ids[k]),
                           raw=None if raw is None else raw[k])
    return w, archive
