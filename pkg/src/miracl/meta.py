"""Meta-training over a task family with K scalarised subproblems per iteration.

The outer update is first-order: the gradient of each subproblem's PPO loss is taken at
its adapted parameters on the post-adaptation rollout and applied to the shared
initialisation.  In ``miracl`` mode all K subproblems share one sampled task and the
weights are steered by the archive; ``meta-morl`` mode draws K independent
(task, weight) pairs with plain Dirichlet weights and no weight adaptation.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .metrics import ParetoArchive
from .policy import (
    PolicyLayout,
    PpoBatch,
    PpoHyper,
    clip_grad_norm,
    init_params,
    normalize_advantages,
    ppo_loss_and_grad,
    ppo_update,
    save_params,
    scalarized_rollout,
)
from .rng import stream
from .scalarize import diversity_mechanism, psa_update_step, sample_simplex_weights

log = logging.getLogger(__name__)

MODES = ("miracl", "meta-morl")
LOG_COLUMNS = ("iteration", "env_steps", "mean_scalarized_return", "mean_pre_adapt_return",
               "archive_size", "wall_clock")


@dataclass
class MetaConfig:
    alpha: float = 0.003
    beta: float = 0.001
    k: int = 10
    adapt_steps: int = 4
    budget: int = 1_000_000
    max_iterations: int | None = None
    psa_steps: int = 10
    psa_delta: float = 0.05
    mode: str = "miracl"
    workers: int = 1
    rollout_steps: int = 32
    outer_steps: int = 10
    gamma: float = 0.99
    lam: float = 1.0
    clip: float = 0.3
    vf_coef: float = 0.5
    kl_coef: float = 0.001
    kl_target: float = 0.01
    ent_coef: float = 0.0
    max_grad_norm: float | None = 0.5
    scalarization: str = "linear"
    shared_task: bool = False
    checkpoint_every: int = 50
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("step sizes must be non-negative")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.psa_steps < 0 or self.psa_delta < 0:
            raise ValueError("PSA steps and rate must be non-negative")
        self.hidden = tuple(self.hidden)

    def episodes_per_rollout(self, horizon: int) -> int:
        return max(1, math.ceil(self.rollout_steps / horizon))

    def steps_per_iteration(self, horizon: int) -> int:
        return self.k * (self.adapt_steps + 1) * self.episodes_per_rollout(horizon) * horizon

    def inner_hyper(self) -> PpoHyper:
        return PpoHyper(lr=self.alpha, minibatch_size=2**62, epochs=1, gamma=self.gamma, lam=self.lam,
                        clip=self.clip, ent_coef=self.ent_coef, vf_coef=self.vf_coef,
                        max_grad_norm=self.max_grad_norm, kl_target=self.kl_target,
                        kl_coef=self.kl_coef, optimizer="sgd")


@dataclass
class AdaptResult:
    params: np.ndarray
    batch: PpoBatch
    raw_totals: np.ndarray
    normalized_totals: np.ndarray
    post_return: float
    pre_return: float
    env_steps: int


def inner_adapt(problem, layout: PolicyLayout, theta: np.ndarray, weight, cfg: MetaConfig,
                rng: np.random.Generator, n_steps: int | None = None) -> AdaptResult:
    """``n_steps`` SGD steps of size alpha on the weight-scalarised PPO loss, then one more rollout."""
    n_steps = cfg.adapt_steps if n_steps is None else n_steps
    hyper = cfg.inner_hyper()
    env = problem.make_env(cfg.episodes_per_rollout(problem.horizon))
    params = theta.copy()
    steps, pre_return = 0, None
    for _ in range(n_steps):
        roll = scalarized_rollout(env, layout, params, weight, rng, cfg.scalarization)
        steps += roll.n_steps
        if pre_return is None:
            pre_return = float(roll.episode_returns.mean())
        if cfg.alpha > 0:
            params, _ = ppo_update(layout, params, roll.to_ppo(cfg.gamma, cfg.lam), hyper, rng)
    post = scalarized_rollout(env, layout, params, weight, rng, cfg.scalarization)
    steps += post.n_steps
    ret = float(post.episode_returns.mean())
    return AdaptResult(params, post.to_ppo(cfg.gamma, cfg.lam), post.raw_totals.mean(axis=0),
                       problem.normalize(post.raw_totals.mean(axis=0)), ret,
                       ret if pre_return is None else pre_return, steps)


def subproblem_gradient(layout: PolicyLayout, params: np.ndarray, batch: PpoBatch, cfg: MetaConfig) -> np.ndarray:
    b = replace(batch, advantages=normalize_advantages(batch.advantages))
    _, grad, _ = ppo_loss_and_grad(layout, params, b, cfg.clip, cfg.vf_coef, cfg.kl_coef, cfg.ent_coef)
    return grad


def meta_update(layout: PolicyLayout, theta: np.ndarray, adapted: list[tuple[np.ndarray, PpoBatch]],
                beta: float, cfg: MetaConfig, n_steps: int = 1):
    """First-order outer step(s).  Returns (theta, first-step mean gradient, skipped flag).

    Each subproblem keeps its adaptation offset: the k-th gradient at step s is taken at
    theta_s + (theta'_k - theta_0) on that subproblem's post-adaptation batch.
    """
    if not adapted:
        raise ValueError("meta_update needs at least one adapted subproblem")
    offsets = [p - theta for p, _ in adapted]
    current = theta.copy()
    first = None
    for _ in range(n_steps):
        grads = [subproblem_gradient(layout, current + d, b, cfg) for d, (_, b) in zip(offsets, adapted)]
        g = np.mean(grads, axis=0)
        if first is None:
            first = g
        if not np.all(np.isfinite(g)):
            log.warning("non-finite meta-gradient; update skipped")
            return theta.copy(), first, True
        current = current - beta * clip_grad_norm(g, cfg.max_grad_norm)
    return current, first, False


def generate_weights(archive: ParetoArchive, k: int, rng: np.random.Generator, delta: float,
                     d: int = 3) -> np.ndarray:
    """Dirichlet draws nudged away from crowded archive regions by one PSA step.

    For each draw, the archive entry with the closest stored weight supplies r and that
    entry's nearest other archived point supplies r'.
    """
    base = sample_simplex_weights(k, d, rng)
    if not archive or delta == 0:
        return base
    stored = [e.weight for e in archive.entries]
    if any(s is None for s in stored) or len(archive) < 2:
        return base
    stored = np.array(stored)
    out = base.copy()
    for i, w in enumerate(base):
        j = int(np.argmin(np.linalg.norm(stored - w, axis=1)))
        r = archive.entries[j].point
        nb = archive.nearest(r, exclude_exact=True)
        if nb is not None:
            out[i] = psa_update_step(w, r, archive.entries[nb].point, delta)
    return out


def _run_subproblem(args):
    problem, layout, theta, weight, cfg, seed, iteration, k = args
    return inner_adapt(problem, layout, theta, weight, cfg, stream(seed, "rollout", iteration, k))


@dataclass
class MetaResult:
    params: np.ndarray
    layout: PolicyLayout
    archive: ParetoArchive
    log: list[dict] = field(default_factory=list)
    env_steps: int = 0
    iterations: int = 0


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def save_checkpoint(out_dir, result: MetaResult, cfg: MetaConfig, tag: str = "final") -> Path:
    ck = Path(out_dir) / "checkpoints" / tag
    ck.mkdir(parents=True, exist_ok=True)
    save_params(ck / "params.bin", result.layout, result.params)
    result.archive.to_csv(ck / "archive.csv")
    cfg_dict = asdict(cfg) | {"hidden": list(cfg.hidden)}
    (ck / "config.yaml").write_text(yaml.safe_dump(cfg_dict, sort_keys=True))
    return ck


def meta_train(family, cfg: MetaConfig, seed: int, out_dir=None, initial_params=None) -> MetaResult:
    """Run meta-iterations until the env-step budget (or ``max_iterations``) is exhausted."""
    probe = family.probe()
    layout = PolicyLayout(probe.obs_dim, probe.act_dim, cfg.hidden)
    theta = init_params(layout, stream(seed, "policy-init")) if initial_params is None else initial_params.copy()
    task_rng, weight_rng = stream(seed, "tasks"), stream(seed, "weights")
    archive = ParetoArchive()
    result = MetaResult(theta, layout, archive)
    per_iter = cfg.steps_per_iteration(probe.horizon)
    d = probe.n_obj
    start = time.perf_counter()
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        it = 0
        while result.env_steps + per_iter <= cfg.budget:
            if cfg.max_iterations is not None and it >= cfg.max_iterations:
                break
            if cfg.mode == "miracl" or cfg.shared_task:
                task = family.sample(task_rng)
                problems = [task] * cfg.k
            else:
                problems = [family.sample(task_rng) for _ in range(cfg.k)]
            if cfg.mode == "miracl" and cfg.psa_steps > 0:
                weights = generate_weights(archive, cfg.k, weight_rng, cfg.psa_delta, d)
            else:
                weights = sample_simplex_weights(cfg.k, d, weight_rng)
            jobs = [(problems[k], layout, theta, weights[k], cfg, seed, it, k) for k in range(cfg.k)]
            adapted = list(pool.map(_run_subproblem, jobs)) if pool else [_run_subproblem(j) for j in jobs]
            theta, _, _ = meta_update(layout, theta, [(a.params, a.batch) for a in adapted], cfg.beta,
                                      cfg, cfg.outer_steps)
            rewards = np.array([a.normalized_totals for a in adapted])
            raw = np.array([a.raw_totals for a in adapted])
            ids = [f"it{it}-k{k}" for k in range(cfg.k)]
            if cfg.mode == "miracl":
                # the adapted weights only feed the log; next iteration's weights come from the archive
                diversity_mechanism(problems[0].task_id, weights, rewards, archive, cfg.psa_steps,
                                    cfg.psa_delta, policy_ids=ids, raw=raw)
            else:
                for k in range(cfg.k):
                    diversity_mechanism(problems[k].task_id, weights[k:k + 1], rewards[k:k + 1], archive,
                                        0, 0.0, policy_ids=ids[k:k + 1], raw=raw[k:k + 1])
            result.env_steps += sum(a.env_steps for a in adapted)
            it += 1
            result.log.append({
                "iteration": it,
                "env_steps": result.env_steps,
                "mean_scalarized_return": float(np.mean([a.post_return for a in adapted])),
                "mean_pre_adapt_return": float(np.mean([a.pre_return for a in adapted])),
                "archive_size": len(archive),
                "wall_clock": time.perf_counter() - start,
                "weights": weights.tolist(),
            })
            result.params, result.iterations = theta, it
            if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir, result, cfg, tag=f"iter{it:06d}")
    finally:
        if pool:
            pool.shutdown()
    result.params = theta
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_log(Path(out_dir) / "train_log.csv", result.log)
        save_checkpoint(out_dir, result, cfg)
    return result


# --- meta-gradient variance diagnostic --------------------------------------------------

def _meta_gradient(problems, weights, layout, theta, cfg, rng_seeds) -> np.ndarray:
    grads = []
    for problem, w, s in zip(problems, weights, rng_seeds):
        a = inner_adapt(problem, layout, theta, w, cfg, np.random.default_rng(s))
        grads.append(subproblem_gradient(layout, a.params, a.batch, cfg))
    return np.mean(grads, axis=0)


def _trace_cov(samples: np.ndarray) -> float:
    return float(np.sum(np.var(samples, axis=0, ddof=1)))


def estimate_metagrad_variance(layout: PolicyLayout, theta: np.ndarray, family, k: int, b: int,
                               n_repeats: int, seed: int, cfg: MetaConfig, n_tasks: int = 4,
                               fixed_task=None, fixed_weight=None,
                               common_random_numbers: bool = False) -> dict:
    """Trace of the covariance of both meta-gradient estimators at a fixed checkpoint.

    ``meta`` averages B independent (task, weight) pairs; ``miracl`` averages K weights on
    one task.  ``miracl_within`` holds the task fixed and resamples only weights and
    rollouts, averaged over ``n_tasks`` tasks.  With ``common_random_numbers`` every
    repeat reuses the same rollout seeds.
    """
    if n_repeats < 2:
        raise ValueError("n_repeats must be >= 2")
    # tasks come from their own stream so runs with different K see the same tasks
    task_rng, rng = stream(seed, "variance-tasks"), stream(seed, "variance")
    d = family.probe().n_obj

    def draw_task():
        return fixed_task if fixed_task is not None else family.sample(task_rng)

    def draw_weights(n):
        if fixed_weight is not None:
            return np.tile(np.asarray(fixed_weight, dtype=float), (n, 1))
        return sample_simplex_weights(n, d, rng)

    crn = rng.integers(2**63 - 1, size=max(k, b))

    def seeds(n):
        return crn[:n] if common_random_numbers else rng.integers(2**63 - 1, size=n)

    within = []
    for t in [draw_task() for _ in range(n_tasks)]:
        g = np.array([_meta_gradient([t] * k, draw_weights(k), layout, theta, cfg, seeds(k))
                      for _ in range(n_repeats)])
        within.append(_trace_cov(g))
    meta = np.array([
        _meta_gradient([draw_task() for _ in range(b)], draw_weights(b), layout, theta, cfg, seeds(b))
        for _ in range(n_repeats)
    ])
    miracl = []
    for _ in range(n_repeats):
        t = draw_task()
        miracl.append(_meta_gradient([t] * k, draw_weights(k), layout, theta, cfg, seeds(k)))
    miracl = np.array(miracl)
    return {
        "k": k,
        "b": b,
        "n_repeats": n_repeats,
        "meta_total": _trace_cov(meta),
        "miracl_total": _trace_cov(miracl),
        "miracl_within": float(np.mean(within)),
        "miracl_within_per_task": [float(x) for x in within],
        "miracl_between": max(_trace_cov(miracl) - float(np.mean(within)), 0.0),
    }
