"""YAML task files and CSV episode traces."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import yaml

from .sim import StepInfo
from .tasks import MarketDemand, NetworkTopology, ScTask

TASK_SCHEMA_VERSION = 1


def task_to_dict(task: ScTask) -> dict:
    topo = task.topology
    mfg = {n: i for i, n in enumerate(topo.manufacturer_ids)}
    nodes = []
    for i, node in enumerate(topo.stock_nodes):
        row = {
            "id": node,
            "initial_inventory": float(task.init_inventory[i]),
            "inventory_cost": float(task.inv_cost[i]),
            "inventory_emission": float(task.inv_emission[i]),
        }
        if node in mfg:
            k = mfg[node]
            row.update(manufacturing_cost=float(task.mfg_cost[k]), yield_ratio=float(task.mfg_yield[k]),
                       manufacturing_emission=float(task.mfg_emission[k]))
        nodes.append(row)
    edges = [
        {"from": s, "to": d, "cost": float(task.transport_cost[e]),
         "emission": float(task.transport_emission[e]), "lead_time": int(task.lead_time[e])}
        for e, (s, d) in enumerate(topo.transport_edges)
    ]
    markets = [
        {"id": z, "retailer": next(r for r, m in topo.retailer_to_market.items() if m == z),
         "kind": md.kind, "mean": md.mean, "std": md.std, "price": md.price}
        for z, md in zip(topo.markets, task.markets)
    ]
    return {
        "schema_version": TASK_SCHEMA_VERSION,
        "name": task.name,
        "horizon": task.horizon,
        "transport_cap": task.transport_cap,
        "mfg_cap": task.mfg_cap,
        "seasonal_amplitude": task.seasonal_amplitude,
        "seasonal_period": task.seasonal_period,
        "rng_seed": task.rng_seed,
        "emission_scale": task.emission_scale,
        "layers": [list(layer) for layer in topo.layers],
        "nodes": nodes,
        "edges": edges,
        "markets": markets,
    }


def task_from_dict(d: dict) -> ScTask:
    if d.get("schema_version") != TASK_SCHEMA_VERSION:
        raise ValueError(f"unsupported task schema version {d.get('schema_version')!r}")
    layers = tuple(tuple(int(n) for n in layer) for layer in d["layers"])
    topo = NetworkTopology(
        layers=layers,
        transport_edges=tuple((int(e["from"]), int(e["to"])) for e in d["edges"]),
        manufacturer_ids=layers[1],
        retailer_to_market={int(m["retailer"]): int(m["id"]) for m in d["markets"]},
    )
    by_id = {int(n["id"]): n for n in d["nodes"]}
    missing = set(topo.stock_nodes) - set(by_id)
    if missing:
        raise ValueError(f"missing node parameters for {sorted(missing)}")
    stock = [by_id[n] for n in topo.stock_nodes]
    mfg = [by_id[n] for n in topo.manufacturer_ids]
    market_by_id = {int(m["id"]): m for m in d["markets"]}
    return ScTask(
        name=d.get("name", "task"),
        topology=topo,
        init_inventory=np.array([n["initial_inventory"] for n in stock], dtype=float),
        inv_cost=np.array([n["inventory_cost"] for n in stock], dtype=float),
        inv_emission=np.array([n["inventory_emission"] for n in stock], dtype=float),
        mfg_cost=np.array([n["manufacturing_cost"] for n in mfg], dtype=float),
        mfg_yield=np.array([n["yield_ratio"] for n in mfg], dtype=float),
        mfg_emission=np.array([n["manufacturing_emission"] for n in mfg], dtype=float),
        transport_cost=np.array([e["cost"] for e in d["edges"]], dtype=float),
        transport_emission=np.array([e["emission"] for e in d["edges"]], dtype=float),
        lead_time=np.array([e["lead_time"] for e in d["edges"]], dtype=np.int64),
        markets=tuple(
            MarketDemand(market_by_id[z]["kind"], float(market_by_id[z]["mean"]),
                         float(market_by_id[z].get("std", 0.0)), float(market_by_id[z]["price"]))
            for z in topo.markets
        ),
        horizon=int(d["horizon"]),
        transport_cap=float(d["transport_cap"]),
        mfg_cap=float(d["mfg_cap"]),
        seasonal_amplitude=float(d.get("seasonal_amplitude", 0.0)),
        seasonal_period=d.get("seasonal_period"),
        rng_seed=int(d.get("rng_seed", 0)),
        emission_scale=float(d.get("emission_scale", 1.0)),
    )


def save_task(task: ScTask, path) -> None:
    Path(path).write_text(yaml.safe_dump(task_to_dict(task), sort_keys=False))


def load_task(path) -> ScTask:
    return task_from_dict(yaml.safe_load(Path(path).read_text()))


TRACE_FILES = ("manufacturing.csv", "inventory.csv", "demand_loss.csv")


def write_traces(task: ScTask, infos: list[StepInfo], out_dir, episode: int = 0) -> list[Path]:
    """Write the three operational trace tables for one episode of ``infos``.

    manufacturing.csv: period, node, units
    inventory.csv:     period, node, units (end of period)
    demand_loss.csv:   period, market, demand, fulfilled, lost
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    topo = task.topology
    paths = [out / name for name in TRACE_FILES]
    with open(paths[0], "w", newline="") as fm, open(paths[1], "w", newline="") as fi, \
            open(paths[2], "w", newline="") as fd:
        wm, wi, wd = csv.writer(fm), csv.writer(fi), csv.writer(fd)
        wm.writerow(["period", "node", "units"])
        wi.writerow(["period", "node", "units"])
        wd.writerow(["period", "market", "demand", "fulfilled", "lost"])
        for info in infos:
            for k, node in enumerate(topo.manufacturer_ids):
                wm.writerow([info.period, node, repr(float(info.manufactured[episode, k]))])
            for j, node in enumerate(topo.stock_nodes):
                wi.writerow([info.period, node, repr(float(info.inventory[episode, j]))])
            for z, market in enumerate(topo.markets):
                wd.writerow([info.period, market, repr(float(info.demand[episode, z])),
                             repr(float(info.fulfilled[episode, z])), repr(float(info.lost[episode, z]))])
    return paths
