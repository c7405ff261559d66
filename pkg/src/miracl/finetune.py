"""Few-shot fine-tuning of a meta-policy into K weighted policies and a Pareto-front set."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import ArchiveEntry, ParetoArchive, non_dominated_indices, write_points_csv
from .policy import PolicyLayout, PpoHyper, evaluate_policy, save_params, train_policy
from .rng import child_seed, stream
from .scalarize import diversity_mechanism, sample_simplex_weights


@dataclass
class FinetuneConfig:
    k: int = 21
    steps: int = 5000
    t_add: int | None = None
    eval_episodes: int = 5
    psa_steps: int = 10
    psa_delta: float = 0.05
    use_psa: bool = True
    scalarization: str = "linear"
    workers: int = 1
    ppo: PpoHyper = field(default_factory=PpoHyper)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.steps < 0 or (self.t_add is not None and self.t_add < 0):
            raise ValueError("step budgets must be non-negative")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")

    @property
    def additional_steps(self) -> int:
        return int(round(0.2 * self.steps)) if self.t_add is None else self.t_add


@dataclass
class FinetuneResult:
    layout: PolicyLayout
    policies: list[np.ndarray]
    initial_weights: np.ndarray
    weights: np.ndarray
    stage1_raw: np.ndarray
    stage1_points: np.ndarray
    raw: np.ndarray
    points: np.ndarray
    front: list[ArchiveEntry]
    archive: ParetoArchive
    env_steps: int = 0

    @property
    def front_points(self) -> np.ndarray:
        return np.array([e.point for e in self.front])


def _train(args):
    problem, layout, params, weight, steps, hyper, seed, k, stage, scalarization = args
    rng = stream(seed, "finetune", stage, k)
    return train_policy(problem, layout, params, weight, steps, hyper, rng, scalarization)


def _map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def fine_tune(problem, layout: PolicyLayout, theta_meta: np.ndarray, cfg: FinetuneConfig,
              seed: int) -> FinetuneResult:
    """Train K weighted copies of ``theta_meta``, adapt the weights once, train on, filter.

    The stage-1 evaluations seed the local archive so that each weight is compared with
    its nearest other solution.  With ``use_psa`` off the second stage keeps the original
    weights, giving an equal-budget baseline.
    """
    if layout.obs_dim != problem.obs_dim or layout.act_dim != problem.act_dim:
        raise ValueError(f"policy layout ({layout.obs_dim}, {layout.act_dim}) does not match problem "
                         f"({problem.obs_dim}, {problem.act_dim})")
    weights = sample_simplex_weights(cfg.k, problem.n_obj, stream(seed, "weights"))
    eval_seed = child_seed(stream(seed, "eval"))
    hyper = cfg.ppo

    jobs = [(problem, layout, theta_meta, weights[k], cfg.steps, hyper, seed, k, 1, cfg.scalarization)
            for k in range(cfg.k)]
    stage1 = _map(_train, jobs, cfg.workers)
    params = [r.params for r in stage1]
    used = sum(r.env_steps for r in stage1)

    def evaluate(ps):
        out = [evaluate_policy(problem, layout, p, cfg.eval_episodes, eval_seed) for p in ps]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])

    raw1, pts1 = evaluate(params)
    ids = [f"policy{k:02d}" for k in range(cfg.k)]
    archive = ParetoArchive()
    for k in range(cfg.k):
        archive.insert(pts1[k], problem.task_id, weights[k], ids[k], raw1[k])
    if cfg.use_psa:
        new_weights, archive = diversity_mechanism(problem.task_id, weights, pts1, archive, cfg.psa_steps,
                                                   cfg.psa_delta, policy_ids=ids, raw=raw1,
                                                   exclude_self=True)
    else:
        new_weights = weights.copy()

    raw, pts = raw1, pts1
    t_add = cfg.additional_steps
    if t_add > 0:
        jobs = [(problem, layout, params[k], new_weights[k], t_add, hyper, seed, k, 2, cfg.scalarization)
                for k in range(cfg.k)]
        stage2 = _map(_train, jobs, cfg.workers)
        params = [r.params for r in stage2]
        used += sum(r.env_steps for r in stage2)
        raw, pts = evaluate(params)

    entries = [ArchiveEntry(pts[k], problem.task_id, new_weights[k], ids[k], raw[k]) for k in range(cfg.k)]
    front = [entries[i] for i in non_dominated_indices(pts)]
    return FinetuneResult(layout, params, weights, new_weights, raw1, pts1, raw, pts, front, archive, used)


def save_finetune(result: FinetuneResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, p in enumerate(result.policies):
        path = out / "policies" / f"policy{k:02d}.bin"
        save_params(path, result.layout, p)
        files.append(path)
    write_points_csv(out / "pf.csv", result.front)
    all_entries = [ArchiveEntry(result.points[k], result.front[0].task_id if result.front else "",
                                result.weights[k], f"policy{k:02d}", result.raw[k])
                   for k in range(len(result.policies))]
    write_points_csv(out / "evaluations.csv", all_entries)
    return files + [out / "pf.csv", out / "evaluations.csv"]
