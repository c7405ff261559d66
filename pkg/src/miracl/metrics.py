"""Pareto dominance, archive, normalisation and the front-quality indicators.

All points are in maximisation orientation: profit as is, emission and inequality
sign-flipped, each component mapped to [0, 1] by :func:`normalize`.
"""

from __future__ import annotations

import bisect
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OBJECTIVES = ("profit", "emission", "inequality")
ORIENTATION = np.array([1.0, -1.0, -1.0])


def dominates(a, b) -> bool:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a >= b) and np.any(a > b))


def _unique_rows(points: np.ndarray) -> np.ndarray:
    seen, keep = set(), []
    for i, p in enumerate(points):
        key = p.tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def domination_matrix(points: np.ndarray) -> np.ndarray:
    """M[i, j] is True when point i dominates point j."""
    p = np.asarray(points, dtype=float)
    ge = (p[:, None, :] >= p[None, :, :]).all(-1)
    gt = (p[:, None, :] > p[None, :, :]).any(-1)
    return ge & gt


def non_dominated_indices(points) -> np.ndarray:
    """Indices of the non-dominated points; exact duplicates are kept once (first occurrence)."""
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("need a non-empty (n, d) array of points")
    uniq = _unique_rows(p)
    dom = domination_matrix(p[uniq]).any(axis=0)
    return uniq[~dom]


def non_dominated_filter(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return p[non_dominated_indices(p)]


def fast_non_dominated_sort(points) -> list[np.ndarray]:
    """Partition indices into successive fronts (rank 0 first)."""
    p = np.asarray(points, dtype=float)
    dom = domination_matrix(p)
    count = dom.sum(axis=0)
    fronts = []
    remaining = np.ones(len(p), dtype=bool)
    while remaining.any():
        front = np.flatnonzero(remaining & (count == 0))
        fronts.append(front)
        remaining[front] = False
        count = count - dom[front].sum(axis=0)
    return fronts


def _area_delta(xs: list, ys: list, px: float, py: float, rx: float, ry: float) -> float:
    """Insert (px, py) into a 2-D staircase (x ascending, y descending); return the area gained."""
    pos = bisect.bisect_left(xs, px)
    if pos < len(xs) and ys[pos] >= py:
        return 0.0
    lo = pos
    while lo > 0 and ys[lo - 1] <= py:
        lo -= 1
    hi = pos + 1 if pos < len(xs) and xs[pos] == px else pos
    prev_x = xs[lo - 1] if lo > 0 else rx
    old = 0.0
    x0 = prev_x
    for i in range(lo, hi):
        old += (xs[i] - x0) * (ys[i] - ry)
        x0 = xs[i]
    new = (px - prev_x) * (py - ry)
    if hi < len(xs):
        old += (xs[hi] - x0) * (ys[hi] - ry)
        new += (xs[hi] - px) * (ys[hi] - ry)
    xs[lo:hi] = [px]
    ys[lo:hi] = [py]
    return new - old


def hypervolume(points, ref=(0.0, 0.0, 0.0)) -> float:
    """Exact 3-D hypervolume (maximisation) by sweeping the third objective.

    Dominated points are allowed and contribute nothing.
    """
    ref = np.asarray(ref, dtype=float)
    p = np.asarray(points, dtype=float).reshape(-1, len(ref))
    if len(ref) != 3:
        raise ValueError("hypervolume is implemented for three objectives")
    if len(p) == 0:
        return 0.0
    if np.any(p < ref):
        raise ValueError("every point must weakly dominate the reference point")
    order = np.argsort(-p[:, 2], kind="stable")
    p = p[order]
    xs, ys = [], []
    area = volume = 0.0
    for i in range(len(p)):
        area += _area_delta(xs, ys, p[i, 0], p[i, 1], ref[0], ref[1])
        z_next = p[i + 1, 2] if i + 1 < len(p) else ref[2]
        volume += area * (p[i, 2] - z_next)
    return float(volume)


def sparsity(points) -> float:
    """Mean squared gap between consecutive values of each objective, sorted descending."""
    p = np.asarray(points, dtype=float)
    if len(p) < 2:
        return 0.0
    s = -np.sort(-p, axis=0)
    return float(np.sum(np.diff(s, axis=0) ** 2) / (len(p) - 1))


def eum(points, weights) -> float:
    """Expected utility: mean over weights of the best linear utility in the set."""
    p = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float)
    if p.size == 0 or w.size == 0:
        raise ValueError("eum needs non-empty points and weights")
    return float(np.mean(np.max(w @ p.T, axis=1)))


def eum_weights(n: int = 100, seed: int = 7, d: int = 3) -> np.ndarray:
    """The shared evaluation weight set (uniform on the simplex)."""
    return np.random.default_rng(seed).dirichlet(np.ones(d), size=n)


# --- normalisation -----------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveBounds:
    """Per-objective (low, high) in maximisation orientation."""

    low: tuple[float, float, float]
    high: tuple[float, float, float]
    n_episodes: int = 0
    seed: int | None = None

    def __post_init__(self):
        lo, hi = np.asarray(self.low, float), np.asarray(self.high, float)
        if np.any(hi <= lo):
            raise ValueError("bounds need high > low for every objective")

    @property
    def span(self) -> np.ndarray:
        return np.asarray(self.high) - np.asarray(self.low)

    def to_json(self) -> str:
        return json.dumps({"low": list(self.low), "high": list(self.high),
                           "n_episodes": self.n_episodes, "seed": self.seed}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ObjectiveBounds":
        d = json.loads(text)
        return cls(tuple(d["low"]), tuple(d["high"]), d.get("n_episodes", 0), d.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ObjectiveBounds":
        return cls.from_json(Path(path).read_text())


def orient(raw) -> np.ndarray:
    return np.asarray(raw, dtype=float) * ORIENTATION


def bounds_from_samples(oriented: np.ndarray, widen: float = 0.10, n_episodes: int = 0,
                        seed: int | None = None) -> ObjectiveBounds:
    lo, hi = oriented.min(axis=0), oriented.max(axis=0)
    pad = widen * (hi - lo)
    lo, hi = lo - pad, hi + pad
    flat = hi <= lo
    lo = np.where(flat, lo - 1.0, lo)
    hi = np.where(flat, hi + 1.0, hi)
    return ObjectiveBounds(tuple(map(float, lo)), tuple(map(float, hi)), n_episodes, seed)


def fit_bounds(task, n_episodes: int = 100, seed: int = 0) -> ObjectiveBounds:
    """Bounds from episode totals of random-action rollouts, widened by 10% of the range."""
    from .env.sim import random_rollout_totals

    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    totals = random_rollout_totals(task, n_episodes, seed)
    return bounds_from_samples(orient(totals), n_episodes=n_episodes, seed=seed)


def normalize(raw, bounds: ObjectiveBounds, clip: bool = True) -> np.ndarray:
    """Raw (profit, emission, inequality) -> oriented point in [0, 1]^3."""
    z = (orient(raw) - np.asarray(bounds.low)) / bounds.span
    return np.clip(z, 0.0, 1.0) if clip else z


# --- archive -----------------------------------------------------------------------

@dataclass
class ArchiveEntry:
    point: np.ndarray
    task_id: str = ""
    weight: np.ndarray | None = None
    policy_id: str = ""
    raw: np.ndarray | None = None


@dataclass
class ParetoArchive:
    """Mutually non-dominated set of normalised points with provenance.  Single writer."""

    entries: list[ArchiveEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    @property
    def points(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 3))
        return np.array([e.point for e in self.entries])

    def is_dominated(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        pts = self.points
        if len(pts) == 0:
            return False
        return bool(np.any((pts >= p).all(1) & (pts > p).any(1)) or np.any((pts == p).all(1)))

    def insert(self, point, task_id: str = "", weight=None, policy_id: str = "", raw=None) -> bool:
        """Add ``point`` unless it is dominated or already present; drop incumbents it dominates."""
        p = np.asarray(point, dtype=float).copy()
        if self.is_dominated(p):
            return False
        pts = self.points
        if len(pts):
            beaten = (p >= pts).all(1) & (p > pts).any(1)
            self.entries = [e for e, b in zip(self.entries, beaten) if not b]
        self.entries.append(ArchiveEntry(
            p, task_id, None if weight is None else np.asarray(weight, float).copy(), policy_id,
            None if raw is None else np.asarray(raw, float).copy()))
        return True

    def nearest(self, point, exclude_exact: bool = False) -> int | None:
        """Index of the Euclidean-nearest archived point; ties go to the lowest index."""
        pts = self.points
        if len(pts) == 0:
            return None
        d = np.linalg.norm(pts - np.asarray(point, dtype=float), axis=1)
        if exclude_exact:
            d = np.where(d == 0.0, np.inf, d)
            if not np.isfinite(d).any():
                return None
        return int(np.argmin(d))

    def to_csv(self, path) -> None:
        write_points_csv(path, self.entries)

    @classmethod
    def from_csv(cls, path) -> "ParetoArchive":
        return cls(read_points_csv(path))


# --- CSV interchange ---------------------------------------------------------------

PF_COLUMNS = (
    ["point_id", "task_id", "policy_id"]
    + [f"w_{o}" for o in OBJECTIVES]
    + list(OBJECTIVES)
    + [f"n_{o}" for o in OBJECTIVES]
)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_points_csv(path, entries: list[ArchiveEntry]) -> None:
    """One row per point: provenance, weight, raw objectives, normalised objectives."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PF_COLUMNS)
        for i, e in enumerate(entries):
            weight = e.weight if e.weight is not None else [None] * 3
            raw = e.raw if e.raw is not None else [None] * 3
            w.writerow([i, e.task_id, e.policy_id] + [_fmt(x) for x in weight]
                       + [_fmt(x) for x in raw] + [_fmt(x) for x in e.point])


def read_points_csv(path) -> list[ArchiveEntry]:
    """Read rows written by :func:`write_points_csv`; the objective count is taken from the
    ``n_*`` columns, and provenance columns are optional."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        names = [c[2:] for c in fields if c.startswith("n_")]
        if not names:
            raise ValueError(f"{path}: no normalised objective columns (n_*) found")
        out = []
        for row in reader:
            def vec(prefix):
                vals = [row.get(f"{prefix}{o}", "") for o in names]
                return None if any(v in ("", None) for v in vals) else np.array([float(v) for v in vals])
            point = vec("n_")
            if point is None:
                raise ValueError(f"{path}: row {reader.line_num} has empty normalised objectives")
            out.append(ArchiveEntry(point, row.get("task_id", ""), vec("w_"), row.get("policy_id", ""),
                                    vec("")))
        return out
