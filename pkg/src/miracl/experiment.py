"""Run orchestration: one config in, an artifact directory with a manifest out."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, ExperimentConfig, config_to_dict, parse_config
from .env import build_task, observe, reset, step, write_traces
from .finetune import fine_tune, save_finetune
from .meta import estimate_metagrad_variance, meta_train
from .metrics import (
    ArchiveEntry,
    ObjectiveBounds,
    eum,
    eum_weights,
    fit_bounds,
    hypervolume,
    read_points_csv,
    sparsity,
    write_points_csv,
)
from .nsga2 import decode_plan, run_nsga2_task
from .policy import ACTION_OFFSET, PolicyLayout, forward, init_params, load_params
from .problems import SupplyChainFamily, SupplyChainProblem
from .rng import stream
from .synthetic import QuadraticFamily

METRICS_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


class Timer:
    def __init__(self):
        self.phases: dict[str, float] = {}

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = self.phases.get(name, 0.0) + time.perf_counter() - t0


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- metrics ----------------------------------------------------------------------------

def front_metrics(points: np.ndarray, weights: np.ndarray) -> dict:
    pts = np.asarray(points, dtype=float)
    return {
        "n_points": int(len(pts)),
        "hypervolume": hypervolume(pts) if pts.shape[1] == 3 else None,
        "eum": eum(pts, weights),
        "sparsity": sparsity(pts),
    }


def _summary(values: list[float]) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if len(v) == 0:
        return {"median": None, "iqr": None, "mean": None}
    q25, q50, q75 = np.percentile(v, [25, 50, 75])
    return {"median": float(q50), "iqr": float(q75 - q25), "mean": float(v.mean())}


def report_metrics(groups: dict[str, list], eum_seed: int = 7, n_weights: int = 100,
                   compare: list | None = None) -> dict:
    """Per-file and aggregate (median, IQR) hypervolume / EUM / sparsity per algorithm.

    ``compare`` lists (a, b) pairs; their delta is 100 * (median_a - median_b) / |median_b|.
    """
    if not groups or not any(groups.values()):
        raise ValueError("report_metrics needs at least one PF file")
    loaded = {name: [(str(f), np.array([e.point for e in read_points_csv(f)])) for f in files]
              for name, files in groups.items()}
    dims = {pts.shape[1] for runs in loaded.values() for _, pts in runs}
    if len(dims) != 1:
        raise ValueError(f"PF files disagree on objective count: {sorted(dims)}")
    weights = eum_weights(n_weights, eum_seed, dims.pop())
    out = {"schema_version": METRICS_SCHEMA_VERSION, "eum_seed": eum_seed, "eum_weights": n_weights,
           "algorithms": {}, "deltas": []}
    for name, runs in loaded.items():
        per = [{"file": f} | front_metrics(pts, weights) for f, pts in runs]
        agg = {m: _summary([r[m] for r in per]) for m in ("hypervolume", "eum", "sparsity")}
        out["algorithms"][name] = {"runs": per, "aggregate": agg}
    for a, b in compare or []:
        if a not in out["algorithms"] or b not in out["algorithms"]:
            raise ValueError(f"cannot compare unknown algorithms {a!r} and {b!r}")
        row = {"a": a, "b": b}
        for m in ("hypervolume", "eum", "sparsity"):
            ma = out["algorithms"][a]["aggregate"][m]["median"]
            mb = out["algorithms"][b]["aggregate"][m]["median"]
            if ma is None or mb is None:
                row[f"delta_{m}_pct"] = None
            elif mb == 0:
                row[f"delta_{m}_pct"] = 0.0 if ma == 0 else None
            else:
                row[f"delta_{m}_pct"] = 100.0 * (ma - mb) / abs(mb)
        out["deltas"].append(row)
    return out


def write_summary_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "metric", "median", "iqr", "mean", "n_runs"])
        for name, block in report["algorithms"].items():
            for m, agg in block["aggregate"].items():
                w.writerow([name, m, agg["median"], agg["iqr"], agg["mean"], len(block["runs"])])


# --- traces -----------------------------------------------------------------------------

def export_traces(task, out_dir, seed: int, params=None, layout: PolicyLayout | None = None,
                  genome=None) -> list[Path]:
    """Replay one seeded episode under a policy's mean action or an open-loop plan and
    write the manufacturing, inventory and demand-loss tables."""
    if (params is None) == (genome is None):
        raise ValueError("pass exactly one of params or genome")
    state = reset(task, seed, 1)
    infos = []
    if genome is not None:
        plan = decode_plan(task, genome)
    for t in range(task.horizon):
        if genome is not None:
            action = plan[t][None, :]
        else:
            mu, _, _ = forward(layout, params, observe(task, state))
            action = task.scale_action(np.clip(mu + ACTION_OFFSET, 0.0, 1.0))
        state, _, info = step(task, state, action)
        infos.append(info)
    return write_traces(task, infos, out_dir)


# --- run modes ----------------------------------------------------------------------------

def _family(cfg: ExperimentConfig):
    if cfg.env.family == "quadratic":
        return QuadraticFamily()
    if cfg.env.family == "supply-chain":
        return SupplyChainFamily(cfg.env.complexity, cfg.env.perturb, cfg.env.bounds_episodes, cfg.env.horizon)
    raise ConfigError(f"unknown env.family {cfg.env.family!r}; expected 'supply-chain' or 'quadratic'")


def _eval_task(cfg: ExperimentConfig):
    task = build_task(cfg.env.complexity, perturb=cfg.env.perturb, rng_seed=cfg.env.task_seed)
    if cfg.env.horizon is not None:
        task = replace(task, horizon=cfg.env.horizon)
    return task


def _bounds(cfg: ExperimentConfig, task, out: Path, files: list) -> ObjectiveBounds:
    if cfg.bounds_path:
        p = Path(cfg.bounds_path)
        if not p.exists():
            raise ConfigError(f"bounds file not found: {p} (field 'bounds_path')")
        bounds = ObjectiveBounds.load(p)
    else:
        bounds = fit_bounds(task, cfg.env.bounds_episodes, cfg.env.task_seed)
    path = out / "bounds.json"
    bounds.save(path)
    files.append(path)
    return bounds


def _resolve_params(path_str: str | None, field_name: str):
    if not path_str:
        raise ConfigError(f"missing required field '{field_name}'")
    p = Path(path_str)
    if p.is_dir():
        p = p / "params.bin"
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {p} (field '{field_name}')")
    return load_params(p)


def _run_meta(cfg, out, timer, files, results):
    family = _family(cfg)
    mcfg = replace(cfg.meta, workers=cfg.workers)
    for s in cfg.seeds:
        d = out / f"seed_{s}"
        with timer.phase(f"meta_train_seed_{s}"):
            res = meta_train(family, mcfg, s, out_dir=d)
        files.extend(sorted(p for p in d.rglob("*") if p.is_file()))
        results[str(s)] = {"iterations": res.iterations, "env_steps": res.env_steps,
                           "archive_size": len(res.archive)}


def _run_finetune(cfg, out, timer, files, results):
    layout, theta = _resolve_params(cfg.finetune.meta_checkpoint, "finetune.meta_checkpoint")
    task = _eval_task(cfg)
    bounds = _bounds(cfg, task, out, files)
    problem = SupplyChainProblem(task, bounds, f"{task.name}:{cfg.env.task_seed}")
    fcfg = cfg.finetune_config()
    weights = eum_weights()
    for s in cfg.seeds:
        d = out / f"seed_{s}"
        with timer.phase(f"fine_tune_seed_{s}"):
            res = fine_tune(problem, layout, theta, fcfg, s)
        files.extend(save_finetune(res, d))
        m = front_metrics(res.front_points, weights)
        files.append(_write_json(d / "metrics.json", {"schema_version": METRICS_SCHEMA_VERSION, **m}))
        results[str(s)] = m
        if cfg.traces.export:
            with timer.phase(f"traces_seed_{s}"):
                files.extend(export_traces(task, d / "traces", s, params=res.policies[0], layout=layout))


def _run_nsga2(cfg, out, timer, files, results):
    task = _eval_task(cfg)
    bounds = _bounds(cfg, task, out, files)
    weights = eum_weights()
    for s in cfg.seeds:
        d = out / f"seed_{s}"
        d.mkdir(parents=True, exist_ok=True)
        with timer.phase(f"nsga2_seed_{s}"):
            res = run_nsga2_task(task, bounds, replace(cfg.nsga2, seed=s))
        entries = [ArchiveEntry(res.front[i], f"{task.name}:{cfg.env.task_seed}", None, f"genome{i:03d}",
                                res.front_raw[i]) for i in range(len(res.front))]
        write_points_csv(d / "pf.csv", entries)
        hv_path = d / "hv.csv"
        with open(hv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["generation", "hv_archive", "hv_front", "archive_size"])
            w.writeheader()
            for row in res.hv_log:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        files += [d / "pf.csv", hv_path]
        m = front_metrics(res.front, weights)
        files.append(_write_json(d / "metrics.json", {"schema_version": METRICS_SCHEMA_VERSION, **m}))
        results[str(s)] = m
        if cfg.traces.export:
            files.extend(export_traces(task, d / "traces", s, genome=res.front_genomes[0]))


def _run_evaluate(cfg, out, timer, files, results):
    e = cfg.evaluate
    if not e.algorithms:
        raise ConfigError("missing required field 'evaluate.algorithms'")
    for name, paths in e.algorithms.items():
        for p in paths:
            if not Path(p).exists():
                raise ConfigError(f"PF file not found: {p} (field 'evaluate.algorithms.{name}')")
    with timer.phase("report"):
        rep = report_metrics(e.algorithms, e.eum_seed, e.eum_weights, e.compare)
    files.append(_write_json(out / "metrics.json", rep))
    write_summary_csv(rep, out / "summary.csv")
    files.append(out / "summary.csv")
    results["report"] = {n: b["aggregate"] for n, b in rep["algorithms"].items()}


def _run_variance(cfg, out, timer, files, results):
    family = _family(cfg)
    v = cfg.variance
    if v.checkpoint:
        layout, theta = _resolve_params(v.checkpoint, "variance.checkpoint")
    else:
        probe = family.probe()
        layout = PolicyLayout(probe.obs_dim, probe.act_dim, cfg.meta.hidden)
        theta = init_params(layout, stream(cfg.seeds[0], "policy-init"))
    rows = []
    for s in cfg.seeds:
        for k in v.k_values:
            with timer.phase(f"variance_seed_{s}_k{k}"):
                r = estimate_metagrad_variance(layout, theta, family, k, k, v.n_repeats, s,
                                               replace(cfg.meta, k=k), n_tasks=v.n_tasks)
            rows.append({"seed": s} | r)
    files.append(_write_json(out / "variance.json", {"schema_version": METRICS_SCHEMA_VERSION, "runs": rows}))
    results["variance"] = rows


MODE_RUNNERS = {
    "meta-train": _run_meta,
    "fine-tune": _run_finetune,
    "nsga2": _run_nsga2,
    "evaluate": _run_evaluate,
    "diagnose-variance": _run_variance,
}


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float) + "\n")
    return path


def run_experiment(cfg: ExperimentConfig, config_text: str | None = None) -> Path:
    """Execute ``cfg`` and write ``manifest.json``; returns the output directory."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {out} ({exc})") from None
    timer, files, results = Timer(), [], {}
    echo = config_to_dict(cfg)
    (out / "config.yaml").write_text(yaml.safe_dump(echo, sort_keys=True))
    with timer.phase("total"):
        MODE_RUNNERS[cfg.mode](cfg, out, timer, files, results)
    files = sorted({Path(f) for f in files} | {out / "config.yaml"})
    manifest = {
        "schema_version": 1,
        "version": __version__,
        "mode": cfg.mode,
        "seeds": list(cfg.seeds),
        "config": echo,
        "source_config": config_text,
        "timings_s": timer.phases,
        "platform": {"python": platform.python_version(), "numpy": np.__version__},
        "results": results,
        "files": [{"path": str(f.relative_to(out)), "sha256": sha256(f), "bytes": f.stat().st_size}
                  for f in files],
    }
    _write_json(out / MANIFEST_NAME, manifest)
    return out


def config_from_manifest(path, out: str | None = None) -> ExperimentConfig:
    data = json.loads(Path(path).read_text())
    cfg = parse_config(yaml.safe_dump(data["config"]), f"{path}:config", out=out)
    return cfg


def rerun(manifest_path, out: str | None = None) -> Path:
    return run_experiment(config_from_manifest(manifest_path, out))
