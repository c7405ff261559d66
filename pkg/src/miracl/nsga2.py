"""NSGA-II over open-loop action plans, plus a deterministic linear toy problem.

Genomes are vectors in [0, 1]; on the simulator a genome is a (T, action_dim) unit plan
scaled by the task's capacities.  Objectives are maximised throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import reset, step
from .metrics import ParetoArchive, fast_non_dominated_sort, hypervolume, normalize
from .rng import child_seed


@dataclass
class Nsga2Config:
    population: int = 300
    offspring: int = 30
    crossover_prob: float = 0.9
    crossover_eta: float = 15.0
    mutation_eta: float = 20.0
    mutation_prob: float | None = None  # default 1 / genome length
    generations: int = 100
    eval_episodes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.offspring < 1:
            raise ValueError("offspring must be >= 1")
        for p in (self.crossover_prob, self.mutation_prob):
            if p is not None and not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


def crowding_distance(points: np.ndarray) -> np.ndarray:
    """Per-point crowding distance within one front; extremes get +inf."""
    p = np.asarray(points, dtype=float)
    n, d = p.shape
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for j in range(d):
        order = np.argsort(p[:, j], kind="stable")
        col = p[order, j]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = col[-1] - col[0]
        if span > 0:
            dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    return dist


def rank_and_crowding(objs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rank = np.empty(len(objs), dtype=int)
    crowd = np.empty(len(objs))
    for r, front in enumerate(fast_non_dominated_sort(objs)):
        rank[front] = r
        crowd[front] = crowding_distance(objs[front])
    return rank, crowd


def sbx_crossover(p1, p2, eta: float, prob: float, rng: np.random.Generator, clip: bool = True):
    """Simulated binary crossover.  Without clipping, each gene pair keeps its mean."""
    p1, p2 = np.asarray(p1, dtype=float), np.asarray(p2, dtype=float)
    if p1.shape != p2.shape:
        raise ValueError("parents must have the same length")
    c1, c2 = p1.copy(), p2.copy()
    if rng.random() >= prob:
        return c1, c2
    u = rng.random(p1.shape)
    swap = rng.random(p1.shape) < 0.5
    beta = np.where(u <= 0.5, (2 * u) ** (1 / (eta + 1)), (1 / (2 * (1 - u))) ** (1 / (eta + 1)))
    mask = (rng.random(p1.shape) < 0.5) & (p1 != p2)
    x1 = 0.5 * ((1 + beta) * p1 + (1 - beta) * p2)
    x2 = 0.5 * ((1 - beta) * p1 + (1 + beta) * p2)
    x1, x2 = np.where(swap, x2, x1), np.where(swap, x1, x2)
    c1 = np.where(mask, x1, c1)
    c2 = np.where(mask, x2, c2)
    if clip:
        c1, c2 = np.clip(c1, 0.0, 1.0), np.clip(c2, 0.0, 1.0)
    return c1, c2


def polynomial_mutation(g, eta: float, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Bounded polynomial mutation on [0, 1]."""
    y = np.asarray(g, dtype=float).copy()
    mask = rng.random(y.shape) < prob
    r = rng.random(y.shape)
    power = 1.0 / (eta + 1.0)
    with np.errstate(over="ignore", under="ignore"):
        lo_val = 2 * r + (1 - 2 * r) * (1 - y) ** (eta + 1)
        hi_val = 2 * (1 - r) + 2 * (r - 0.5) * y ** (eta + 1)
        dq = np.where(r < 0.5, lo_val ** power - 1.0, 1.0 - hi_val ** power)
    y = np.where(mask, y + dq, y)
    return np.clip(y, 0.0, 1.0)


def _tournament(rank, crowd, rng, n):
    a, b = rng.integers(len(rank), size=(2, n))
    better = (rank[a] < rank[b]) | ((rank[a] == rank[b]) & (crowd[a] > crowd[b]))
    return np.where(better, a, b)


def survivor_selection(objs: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n best by (rank, -crowding)."""
    keep = []
    for front in fast_non_dominated_sort(objs):
        if len(keep) + len(front) <= n:
            keep.extend(front.tolist())
        else:
            cd = crowding_distance(objs[front])
            order = np.argsort(-cd, kind="stable")
            keep.extend(front[order[: n - len(keep)]].tolist())
            break
    return np.array(keep, dtype=int)


@dataclass
class Nsga2Result:
    population: np.ndarray
    objectives: np.ndarray  # normalised, maximisation
    front: np.ndarray
    front_genomes: np.ndarray
    archive: ParetoArchive
    hv_log: list[dict] = field(default_factory=list)
    raw_objectives: np.ndarray | None = None
    front_raw: np.ndarray | None = None


def run_nsga2(evaluate, n_var: int, cfg: Nsga2Config, rng: np.random.Generator,
              normalize_fn=None) -> Nsga2Result:
    """Elitist (mu + lambda) NSGA-II.

    ``evaluate(genomes) -> (objectives, raw)`` returns maximisation objectives used for
    selection and any raw values to carry along.  ``normalize_fn`` maps objectives to
    [0, 1] for the hypervolume log; by default objectives are assumed normalised.
    """
    norm = normalize_fn or (lambda x: np.clip(x, 0.0, 1.0))
    pm = cfg.mutation_prob if cfg.mutation_prob is not None else 1.0 / n_var
    pop = rng.random((cfg.population, n_var))
    objs, raw = evaluate(pop)
    archive = ParetoArchive()
    hv_log = []

    def hv(points):
        # two-objective problems are measured as unit-depth slabs
        return hypervolume(points if points.shape[1] == 3 else np.column_stack([points, np.ones(len(points))]))

    def log_generation(gen, new_objs, new_raw):
        pts = norm(new_objs)
        for i in range(len(pts)):
            archive.insert(pts[i], raw=None if new_raw is None else new_raw[i], policy_id=f"g{gen}")
        front = norm(objs[fast_non_dominated_sort(objs)[0]])
        hv_log.append({"generation": gen, "hv_archive": hv(archive.points),
                       "hv_front": hv(front), "archive_size": len(archive)})

    log_generation(0, objs, raw)
    for gen in range(1, cfg.generations + 1):
        rank, crowd = rank_and_crowding(objs)
        parents = _tournament(rank, crowd, rng, cfg.offspring + cfg.offspring % 2)
        kids = []
        for i in range(0, len(parents), 2):
            c1, c2 = sbx_crossover(pop[parents[i]], pop[parents[i + 1]], cfg.crossover_eta,
                                   cfg.crossover_prob, rng)
            kids += [polynomial_mutation(c1, cfg.mutation_eta, pm, rng),
                     polynomial_mutation(c2, cfg.mutation_eta, pm, rng)]
        kids = np.array(kids[: cfg.offspring])
        kid_objs, kid_raw = evaluate(kids)
        pop = np.vstack([pop, kids])
        objs = np.vstack([objs, kid_objs])
        if raw is not None:
            raw = np.vstack([raw, kid_raw])
        keep = survivor_selection(objs, cfg.population)
        pop, objs = pop[keep], objs[keep]
        raw = None if raw is None else raw[keep]
        log_generation(gen, kid_objs, kid_raw)
    first = fast_non_dominated_sort(objs)[0]
    return Nsga2Result(pop, norm(objs), norm(objs[first]), pop[first], archive, hv_log, raw,
                       None if raw is None else raw[first])


# --- supply-chain plans ----------------------------------------------------------------

def plan_evaluator(task, bounds, eval_episodes: int, rng: np.random.Generator):
    """Evaluator replaying decoded plans on shared episode seeds (common random numbers)."""
    seeds = [child_seed(rng) for _ in range(eval_episodes)]
    T, A = task.horizon, task.action_dim
    upper = task.action_upper()

    def evaluate(genomes: np.ndarray):
        plans = genomes.reshape(len(genomes), T, A) * upper
        totals = np.zeros((len(genomes), 3))
        for s in seeds:
            state = reset(task, s, len(genomes))
            for t in range(T):
                state, obj, _ = step(task, state, plans[:, t, :])
                totals += obj
        raw = totals / len(seeds)
        return normalize(raw, bounds, clip=False), raw

    return evaluate


def run_nsga2_task(task, bounds, cfg: Nsga2Config) -> Nsga2Result:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6E5A]))
    evaluate = plan_evaluator(task, bounds, cfg.eval_episodes, rng)
    return run_nsga2(evaluate, task.horizon * task.action_dim, cfg, rng)


def decode_plan(task, genome: np.ndarray) -> np.ndarray:
    return np.asarray(genome).reshape(task.horizon, task.action_dim) * task.action_upper()


# --- linear toy -----------------------------------------------------------------------

@dataclass(frozen=True)
class LinearToy:
    """Ship x_i in [0, 1] on n lanes: profit sum(p_i x_i), emission sum(e_i x_i).

    Objectives are reported as (profit / sum p, 1 - emission / sum e), both maximised.
    """

    profit: np.ndarray
    emission: np.ndarray

    @classmethod
    def random(cls, n: int = 3, rng: np.random.Generator | None = None) -> "LinearToy":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(rng.uniform(0.5, 2.0, n), rng.uniform(0.5, 2.0, n))

    def evaluate(self, genomes: np.ndarray):
        f1 = genomes @ self.profit / self.profit.sum()
        f2 = 1.0 - genomes @ self.emission / self.emission.sum()
        objs = np.stack([f1, f2], axis=1)
        return objs, objs

    def best_profit(self, emission_share) -> np.ndarray:
        """Analytic front: greedy fill of lanes in decreasing profit/emission ratio."""
        order = np.argsort(-self.profit / self.emission)
        e_cum = np.concatenate([[0.0], np.cumsum(self.emission[order])]) / self.emission.sum()
        p_cum = np.concatenate([[0.0], np.cumsum(self.profit[order])]) / self.profit.sum()
        return np.interp(emission_share, e_cum, p_cum)

    def front_deviation(self, objs: np.ndarray) -> float:
        """Largest vertical gap between points and the analytic trade-off curve."""
        return float(np.max(np.abs(self.best_profit(1.0 - objs[:, 1]) - objs[:, 0])))

