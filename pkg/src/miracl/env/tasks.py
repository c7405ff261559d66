"""Supply-chain network topologies, task parameters and the canonical instances."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

L_MAX = 3
DEFAULT_HORIZON = 100
DEFAULT_TRANSPORT_CAP = 200.0
DEFAULT_MFG_CAP = 400.0
DEFAULT_SEASONAL_AMPLITUDE = 0.2
PERTURB_RANGE = (0.90, 1.10)
COMPLEXITIES = ("simple", "moderate", "complex")


@dataclass(frozen=True)
class NetworkTopology:
    """Strictly layered network: suppliers, manufacturers, distributor tiers, retailers, markets."""

    layers: tuple[tuple[int, ...], ...]
    transport_edges: tuple[tuple[int, int], ...]
    manufacturer_ids: tuple[int, ...]
    retailer_to_market: dict[int, int]

    def __post_init__(self):
        if len(self.layers) < 4:
            raise ValueError("topology needs suppliers, manufacturers, retailers and markets layers")
        layer_of = {}
        for depth, layer in enumerate(self.layers):
            for node in layer:
                if node in layer_of:
                    raise ValueError(f"node {node} appears in more than one layer")
                layer_of[node] = depth
        for src, dst in self.transport_edges:
            if src not in layer_of or dst not in layer_of:
                raise ValueError(f"edge ({src}, {dst}) references an unknown node")
            if layer_of[dst] != layer_of[src] + 1:
                raise ValueError(f"edge ({src}, {dst}) does not connect consecutive layers")
            if layer_of[dst] == len(self.layers) - 1:
                raise ValueError(f"edge ({src}, {dst}) enters a market; use retailer_to_market")
        if tuple(self.manufacturer_ids) != tuple(self.layers[1]):
            raise ValueError("manufacturer_ids must equal the second layer")
        retailers, markets = self.layers[-2], self.layers[-1]
        if sorted(self.retailer_to_market) != sorted(retailers):
            raise ValueError("every retailer must map to exactly one market")
        if sorted(self.retailer_to_market.values()) != sorted(markets):
            raise ValueError("every market must be served by exactly one retailer")

    @property
    def suppliers(self) -> tuple[int, ...]:
        return self.layers[0]

    @property
    def retailers(self) -> tuple[int, ...]:
        return self.layers[-2]

    @property
    def markets(self) -> tuple[int, ...]:
        return self.layers[-1]

    @property
    def stock_nodes(self) -> tuple[int, ...]:
        """Nodes holding inventory (manufacturers, distributors, retailers) in layer order."""
        return tuple(n for layer in self.layers[1:-1] for n in layer)

    @property
    def n_nodes(self) -> int:
        return sum(len(layer) for layer in self.layers)

    @property
    def n_edges(self) -> int:
        """Edge count including the retailer-to-market links."""
        return len(self.transport_edges) + len(self.retailer_to_market)

    @property
    def action_dim(self) -> int:
        return len(self.transport_edges) + len(self.manufacturer_ids)


@dataclass(frozen=True)
class MarketDemand:
    kind: str  # "normal" or "poisson"
    mean: float
    std: float = 0.0
    price: float = 0.0

    def __post_init__(self):
        if self.kind not in ("normal", "poisson"):
            raise ValueError(f"unknown demand kind {self.kind!r}")
        if self.mean < 0 or self.std < 0 or self.price < 0:
            raise ValueError("demand mean, std and price must be non-negative")


@dataclass(frozen=True, eq=False)
class ScTask:
    """A fully instantiated supply-chain MOMDP.

    Per-node arrays follow ``topology.stock_nodes``; per-manufacturer arrays follow
    ``topology.manufacturer_ids``; per-edge arrays follow ``topology.transport_edges``;
    ``markets`` follows ``topology.markets``.
    """

    name: str
    topology: NetworkTopology
    init_inventory: np.ndarray
    inv_cost: np.ndarray
    inv_emission: np.ndarray
    mfg_cost: np.ndarray
    mfg_yield: np.ndarray
    mfg_emission: np.ndarray
    transport_cost: np.ndarray
    transport_emission: np.ndarray
    lead_time: np.ndarray
    markets: tuple[MarketDemand, ...]
    horizon: int = DEFAULT_HORIZON
    transport_cap: float = DEFAULT_TRANSPORT_CAP
    mfg_cap: float = DEFAULT_MFG_CAP
    seasonal_amplitude: float = DEFAULT_SEASONAL_AMPLITUDE
    seasonal_period: float | None = None
    rng_seed: int = 0
    emission_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        topo = self.topology
        n_stock, n_mfg, n_edge = len(topo.stock_nodes), len(topo.manufacturer_ids), len(topo.transport_edges)
        for name, arr, n in (
            ("init_inventory", self.init_inventory, n_stock),
            ("inv_cost", self.inv_cost, n_stock),
            ("inv_emission", self.inv_emission, n_stock),
            ("mfg_cost", self.mfg_cost, n_mfg),
            ("mfg_yield", self.mfg_yield, n_mfg),
            ("mfg_emission", self.mfg_emission, n_mfg),
            ("transport_cost", self.transport_cost, n_edge),
            ("transport_emission", self.transport_emission, n_edge),
            ("lead_time", self.lead_time, n_edge),
        ):
            a = np.asarray(arr, dtype=np.int64 if name == "lead_time" else float)
            if a.shape != (n,):
                raise ValueError(f"{name} has shape {a.shape}, expected ({n},)")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if len(self.markets) != len(topo.markets):
            raise ValueError("one demand model per market is required")
        for name in ("init_inventory", "inv_cost", "inv_emission", "mfg_cost", "mfg_emission",
                     "transport_cost", "transport_emission"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} must be non-negative")
        if np.any(self.mfg_yield <= 0):
            raise ValueError("manufacturing yield must be positive")
        if np.any(self.lead_time < 1) or np.any(self.lead_time > L_MAX):
            raise ValueError(f"lead times must lie in [1, {L_MAX}]")
        if self.transport_cap <= 0 or self.mfg_cap <= 0:
            raise ValueError("capacities must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def period(self) -> float:
        return float(self.seasonal_period) if self.seasonal_period else float(self.horizon)

    @property
    def n_transport(self) -> int:
        return len(self.topology.transport_edges)

    @property
    def action_dim(self) -> int:
        return self.topology.action_dim

    @property
    def obs_dim(self) -> int:
        return len(self.topology.stock_nodes) + self.n_transport * L_MAX + 3

    @property
    def prices(self) -> np.ndarray:
        return np.array([m.price for m in self.markets])

    @cached_property
    def index(self) -> "TaskIndex":
        return TaskIndex.build(self)

    def action_upper(self) -> np.ndarray:
        return np.concatenate([np.full(self.n_transport, self.transport_cap),
                               np.full(len(self.topology.manufacturer_ids), self.mfg_cap)])

    def scale_action(self, unit_action: np.ndarray) -> np.ndarray:
        """Map actions in [0, 1] to units: transport by Cap, manufacturing by mfg_cap."""
        return np.clip(unit_action, 0.0, 1.0) * self.action_upper()

    def with_emission_scale(self, scale: float) -> "ScTask":
        return replace(self, emission_scale=float(scale))


@dataclass(frozen=True)
class TaskIndex:
    """Dense incidence structures derived from the topology (cached per task)."""

    edge_src: np.ndarray  # stock index of the edge source, -1 for suppliers
    edge_dst: np.ndarray  # stock index of the edge destination
    src_onehot: np.ndarray  # (n_edges, n_stock); supplier rows are zero
    dst_onehot: np.ndarray  # (n_edges, n_stock)
    mfg_pos: np.ndarray  # stock index of each manufacturer
    retailer_pos: np.ndarray  # stock index of the retailer serving each market
    edge_price: np.ndarray  # revenue per unit arriving on the edge (retailer inbound only)
    inv_scale: np.ndarray  # observation scale per stock node

    @classmethod
    def build(cls, task: ScTask) -> "TaskIndex":
        topo = task.topology
        stock = {n: i for i, n in enumerate(topo.stock_nodes)}
        n_edge, n_stock = task.n_transport, len(stock)
        edge_src = np.array([stock.get(s, -1) for s, _ in topo.transport_edges], dtype=np.int64)
        edge_dst = np.array([stock[d] for _, d in topo.transport_edges], dtype=np.int64)
        src_onehot = np.zeros((n_edge, n_stock))
        dst_onehot = np.zeros((n_edge, n_stock))
        for e in range(n_edge):
            if edge_src[e] >= 0:
                src_onehot[e, edge_src[e]] = 1.0
            dst_onehot[e, edge_dst[e]] = 1.0
        market_of = topo.retailer_to_market
        retailer_of_market = {m: r for r, m in market_of.items()}
        retailer_pos = np.array([stock[retailer_of_market[m]] for m in topo.markets], dtype=np.int64)
        price_by_retailer = {r: task.markets[topo.markets.index(m)].price for r, m in market_of.items()}
        edge_price = np.array([price_by_retailer.get(d, 0.0) for _, d in topo.transport_edges])
        inv_scale = np.maximum(2.0 * task.init_inventory, task.transport_cap)
        return cls(edge_src, edge_dst, src_onehot, dst_onehot,
                   np.array([stock[m] for m in topo.manufacturer_ids], dtype=np.int64),
                   retailer_pos, edge_price, inv_scale)


# --- canonical instances -------------------------------------------------------------

def _layered(*layers):
    return tuple(tuple(layer) for layer in layers)


_MARKETS = {
    1: MarketDemand("normal", 150.0, 60.0),
    2: MarketDemand("normal", 100.0, 40.0),
    3: MarketDemand("poisson", 200.0),
    4: MarketDemand("poisson", 100.0),
    5: MarketDemand("poisson", 150.0),
}

# node: (I0, inventory cost, inventory emission, mfg cost, yield, mfg emission)
_CANONICAL = {
    "simple": dict(
        layers=_layered([1], [2, 3], [4, 5], [6, 7]),
        nodes={
            2: (380, 0.11, 0.0002, 2.0, 1.0, 5.0126),
            3: (350, 0.13, 0.0002, 2.2, 1.0, 4.5754),
            4: (400, 0.12, 0.0002),
            5: (80, 0.15, 0.0002),
        },
        edges=[
            (1, 2, 0.22, 0.1258), (1, 3, 0.69, 0.3947),
            (2, 4, 1.055, 0.6035), (2, 5, 0.43, 0.2460),
            (3, 4, 0.485, 0.2774), (3, 5, 0.75, 0.4290),
        ],
        retail={4: 6, 5: 7},
        market_ids=[1, 2],
        prices=[20.0, 20.0],
    ),
    "moderate": dict(
        layers=_layered([1, 2], [3, 4, 5], [6, 7], [8, 9, 10], [11, 12, 13]),
        nodes={
            3: (380, 0.11, 0.0002, 2.0, 1.0, 5.0126),
            4: (350, 0.13, 0.0002, 2.2, 1.0, 4.5754),
            5: (400, 0.12, 0.0002, 2.3, 1.0, 5.4491),
            6: (80, 0.15, 0.0002),
            7: (110, 0.20, 0.0002),
            8: (100, 0.25, 0.0002),
            9: (80, 0.30, 0.0002),
            10: (120, 0.20, 0.0002),
        },
        edges=[
            (1, 3, 0.22, 0.1258), (1, 4, 0.69, 0.3947), (1, 5, 0.565, 0.3232),
            (2, 3, 1.055, 0.6035), (2, 4, 0.65, 0.3718), (2, 5, 0.63, 0.3604),
            (3, 6, 0.075, 0.0429), (3, 7, 0.43, 0.2460),
            (4, 6, 0.63, 0.3604), (4, 7, 0.23, 0.1316),
            (5, 6, 0.495, 0.2831), (5, 7, 0.075, 0.0429),
            (6, 8, 1.095, 0.6263), (6, 9, 0.625, 0.3575), (6, 10, 0.95, 0.5434),
            (7, 8, 1.64, 0.9381), (7, 9, 1.16, 0.6635), (7, 10, 0.58, 0.3318),
        ],
        retail={8: 11, 9: 12, 10: 13},
        market_ids=[1, 2, 3],
        prices=[20.0, 21.0, 20.5],
    ),
    "complex": dict(
        layers=_layered([1, 2, 3], [4, 5, 6, 7, 8], [9, 10, 11], [12, 13, 14],
                        [15, 16, 17, 18, 19], [20, 21, 22, 23, 24]),
        nodes={
            4: (155, 0.23, 0.0002, 2.0, 1.0, 5.0126),
            5: (267, 0.35, 0.0002, 2.2, 1.0, 4.5754),
            6: (342, 0.22, 0.0002, 2.1, 1.0, 5.4491),
            7: (211, 0.11, 0.0002, 2.0, 1.0, 6.1232),
            8: (162, 0.29, 0.0002, 2.3, 1.0, 5.5157),
            9: (195, 0.37, 0.0002),
            10: (333, 0.11, 0.0002),
            11: (96, 0.36, 0.0002),
            12: (285, 0.33, 0.0002),
            13: (68, 0.26, 0.0002),
            14: (379, 0.30, 0.0002),
            15: (344, 0.17, 0.0002),
            16: (66, 0.29, 0.0002),
            17: (356, 0.27, 0.0002),
            18: (382, 0.23, 0.0002),
            19: (362, 0.37, 0.0002),
        },
        edges=[
            (1, 4, 0.535, 0.3060), (1, 5, 0.265, 0.1516), (1, 6, 1.845, 1.0553),
            (1, 7, 1.6, 0.9152), (1, 8, 1.44, 0.8237),
            (2, 4, 0.36, 0.2059), (2, 5, 0.295, 0.1687), (2, 6, 1.235, 0.7064),
            (2, 7, 0.625, 0.3575), (2, 8, 1.855, 1.0611),
            (3, 4, 0.6, 0.3432), (3, 5, 0.175, 0.1001), (3, 6, 0.745, 0.4261),
            (3, 7, 1.33, 0.7608), (3, 8, 0.17, 0.0972),
            (4, 9, 1.99, 1.1383), (4, 10, 0.34, 0.1945), (4, 11, 0.81, 0.4633),
            (5, 9, 1.515, 0.8666), (5, 10, 0.66, 0.3775), (5, 11, 0.645, 0.3689),
            (6, 9, 1.695, 0.9695), (6, 10, 1.58, 0.9038), (6, 11, 0.815, 0.4662),
            (7, 9, 1.615, 0.9238), (7, 10, 1.26, 0.7207), (7, 11, 0.675, 0.3861),
            (8, 9, 1.03, 0.5892), (8, 10, 1.09, 0.6235), (8, 11, 1.63, 0.9324),
            (9, 12, 1.965, 1.1240), (9, 13, 1.925, 1.1011), (9, 14, 1.62, 0.9266),
            # the source table lists destinations 8, 9, 10 for nodes 10 and 11;
            # a layered network requires the second distributor tier 12-14
            (10, 12, 1.49, 0.8523), (10, 13, 1.96, 1.1211), (10, 14, 0.635, 0.3632),
            (11, 12, 1.87, 1.0696), (11, 13, 0.2, 0.1144), (11, 14, 1.855, 1.0611),
            (12, 15, 1.945, 1.1125), (12, 16, 0.965, 0.5520), (12, 17, 1.905, 1.0897),
            (12, 18, 0.9, 0.5148), (12, 19, 0.69, 0.3947),
            (13, 15, 0.805, 0.4605), (13, 16, 1.065, 0.6092), (13, 17, 1.84, 1.0525),
            (13, 18, 0.83, 0.4748), (13, 19, 1.885, 1.0782),
            (14, 15, 1.66, 0.9495), (14, 16, 1.51, 0.8637), (14, 17, 0.59, 0.3375),
            (14, 18, 0.4, 0.2288), (14, 19, 1.395, 0.7979),
        ],
        retail={15: 20, 16: 21, 17: 22, 18: 23, 19: 24},
        market_ids=[1, 2, 3, 4, 5],
        prices=[100.0, 101.0, 105.0, 103.0, 104.0],
    ),
}


def _canonical_task(complexity: str, lead_time: np.ndarray, seed: int) -> ScTask:
    canon = _CANONICAL[complexity]
    layers = canon["layers"]
    topo = NetworkTopology(
        layers=layers,
        transport_edges=tuple((s, d) for s, d, _, _ in canon["edges"]),
        manufacturer_ids=layers[1],
        retailer_to_market=dict(canon["retail"]),
    )
    rows = [canon["nodes"][n] for n in topo.stock_nodes]
    mfg_rows = [canon["nodes"][n] for n in topo.manufacturer_ids]
    markets = tuple(replace(_MARKETS[i], price=p) for i, p in zip(canon["market_ids"], canon["prices"]))
    return ScTask(
        name=complexity,
        topology=topo,
        init_inventory=np.array([r[0] for r in rows], dtype=float),
        inv_cost=np.array([r[1] for r in rows]),
        inv_emission=np.array([r[2] for r in rows]),
        mfg_cost=np.array([r[3] for r in mfg_rows]),
        mfg_yield=np.array([r[4] for r in mfg_rows]),
        mfg_emission=np.array([r[5] for r in mfg_rows]),
        transport_cost=np.array([e[2] for e in canon["edges"]]),
        transport_emission=np.array([e[3] for e in canon["edges"]]),
        lead_time=lead_time,
        markets=markets,
        rng_seed=seed,
    )


def build_task(complexity: str, perturb: bool = False, rng_seed: int = 0,
               emission_scale_episodes: int = 100) -> ScTask:
    """Instantiate one of the canonical networks.

    Lead times are drawn per edge from {1, 2, 3} using ``rng_seed`` in both modes.
    With ``perturb`` every cost, price and demand parameter is additionally scaled by
    an independent factor drawn from U(0.9, 1.1).
    """
    if complexity not in _CANONICAL:
        raise ValueError(f"unknown complexity {complexity!r}; expected one of {COMPLEXITIES}")
    rng = np.random.default_rng(rng_seed)
    n_edges = len(_CANONICAL[complexity]["edges"])
    lead_time = rng.integers(1, L_MAX + 1, size=n_edges)
    task = _canonical_task(complexity, lead_time, rng_seed)
    if perturb:
        task = perturb_task(task, rng)
    if emission_scale_episodes > 0:
        from .sim import random_rollout_totals

        totals = random_rollout_totals(task, emission_scale_episodes, seed=rng_seed)
        task = task.with_emission_scale(max(float(totals[:, 1].mean()), 1.0))
    return task


def perturb_task(task: ScTask, rng: np.random.Generator) -> ScTask:
    lo, hi = PERTURB_RANGE

    def jitter(a):
        return np.asarray(a) * rng.uniform(lo, hi, size=np.shape(a))

    markets = tuple(
        replace(m, mean=m.mean * rng.uniform(lo, hi), std=m.std * rng.uniform(lo, hi),
                price=m.price * rng.uniform(lo, hi))
        for m in task.markets
    )
    return replace(
        task,
        name=f"{task.name}-perturbed",
        inv_cost=jitter(task.inv_cost),
        mfg_cost=jitter(task.mfg_cost),
        transport_cost=jitter(task.transport_cost),
        markets=markets,
    )


def micro_chain(init_inventory=(0.0, 0.0), lead_time: int = 1, transport_cost=(0.0, 0.0),
                transport_emission=(0.0, 0.0), inv_cost=(0.0, 0.0), inv_emission=(0.0, 0.0),
                mfg_cost: float = 0.0, mfg_yield: float = 1.0, mfg_emission: float = 0.0,
                demand: MarketDemand | None = None, horizon: int = 3,
                seasonal_amplitude: float = 0.0) -> ScTask:
    """One supplier, manufacturer, retailer and market: nodes 1 -> 2 -> 3 -> 4."""
    topo = NetworkTopology(
        layers=((1,), (2,), (3,), (4,)),
        transport_edges=((1, 2), (2, 3)),
        manufacturer_ids=(2,),
        retailer_to_market={3: 4},
    )
    return ScTask(
        name="micro",
        topology=topo,
        init_inventory=np.asarray(init_inventory, dtype=float),
        inv_cost=np.asarray(inv_cost, dtype=float),
        inv_emission=np.asarray(inv_emission, dtype=float),
        mfg_cost=np.array([mfg_cost]),
        mfg_yield=np.array([mfg_yield]),
        mfg_emission=np.array([mfg_emission]),
        transport_cost=np.asarray(transport_cost, dtype=float),
        transport_emission=np.asarray(transport_emission, dtype=float),
        lead_time=np.array([lead_time, lead_time]),
        markets=(demand or MarketDemand("normal", 0.0, 0.0, 20.0),),
        horizon=horizon,
        seasonal_amplitude=seasonal_amplitude,
    )
