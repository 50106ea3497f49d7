"""Match probabilities for a partially occupied vehicle.

Composition for one trip query: attractiveness at each node, discounted by
the effective nearby supply, gives a per-node match probability; an arc
averages its two endpoints and compounds that over its travel time.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .demand import DemandTable, TripQuery, attractiveness_field
from .network import DistanceMatrix, RoadNetwork
from .planner import budget_arc_mask

log = logging.getLogger(__name__)

EMPTY, DROP, PARTIAL, UNCOUNTED = 0, 1, 2, -1
PROB_CEILING = 1.0 - 1e-12
FIELD_COLUMNS = ("from", "to", "p_node_from", "p_node_to", "p_edge", "travel_time_s", "P_ij")


@dataclass(frozen=True)
class ModelParams:
    zeta: float = 1.0
    eta: float = 0.001
    match_radius: float = 2500.0
    # seconds per time unit of the rate fed to the node probability
    rate_unit_s: float = 1.0

    def __post_init__(self):
        if not 0 < self.zeta <= 1:
            raise ValueError(f"zeta must lie in (0, 1], got {self.zeta}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.match_radius > 0:
            raise ValueError(f"match radius must be positive, got {self.match_radius}")


@dataclass(frozen=True, eq=False)
class FleetSnapshot:
    """Immutable view of the fleet used for supply counting.

    ``positions[k]`` is the node vehicle ``k`` acts from (downstream node
    when mid-arc); ``categories[k]`` is one of EMPTY, DROP, PARTIAL or
    UNCOUNTED.  ``routes`` holds the committed routes of partially occupied
    vehicles.
    """

    vehicle_ids: np.ndarray
    positions: np.ndarray
    categories: np.ndarray
    routes: tuple = ()

    @classmethod
    def from_lists(cls, positions, categories, routes=(), vehicle_ids=None):
        positions = np.asarray(positions, dtype=np.int64)
        if vehicle_ids is None:
            vehicle_ids = np.arange(len(positions))
        return cls(
            vehicle_ids=np.asarray(vehicle_ids, dtype=np.int64),
            positions=positions,
            categories=np.asarray(categories, dtype=np.int64),
            routes=tuple(tuple(r) for r in routes),
        )


@dataclass(frozen=True, eq=False)
class SupplyCounts:
    n_empty: np.ndarray
    n_drop: np.ndarray
    n_partial: np.ndarray

    @property
    def effective(self) -> np.ndarray:
        return self.n_empty + self.n_drop + 0.5 * self.n_partial


def supply_counts(fleet: FleetSnapshot, dm: DistanceMatrix, params: ModelParams) -> SupplyCounts:
    """Per-node vehicle counts within the matching radius, by category."""
    n = dm.dist.shape[0]
    out = []
    for cat in (EMPTY, DROP, PARTIAL):
        pos = fleet.positions[fleet.categories == cat]
        if len(pos) == 0:
            out.append(np.zeros(n))
            continue
        near = dm.dist[pos, :] <= params.match_radius
        out.append(near.sum(axis=0).astype(float))
    return SupplyCounts(*out)


def effective_supply(i: int, fleet: FleetSnapshot, dm: DistanceMatrix, params: ModelParams) -> float:
    near = dm.dist[fleet.positions, i] <= params.match_radius
    cats = fleet.categories[near]
    return float((cats == EMPTY).sum() + (cats == DROP).sum() + 0.5 * (cats == PARTIAL).sum())


def node_match_probability(lambda_att, n, params: ModelParams):
    """``1 - zeta * exp(-lambda_att / (eta * n))`` with the ``n = 0`` limits.

    Accepts scalars or arrays.
    """
    lam = np.asarray(lambda_att, dtype=float)
    n = np.asarray(n, dtype=float)
    if (lam < 0).any() or (n < 0).any():
        raise ValueError("rates and supply must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        x = lam / (params.eta * n)
    # n = 0: exp(-inf) for positive demand, exp(0) without demand
    x = np.where(n == 0, np.where(lam > 0, np.inf, 0.0), x)
    p = 1.0 - params.zeta * np.exp(-x)
    return float(p) if p.ndim == 0 else p


def edge_match_probability(p_i, p_j):
    return (p_i + p_j) / 2.0


def edge_pickup_probability(p_edge, travel_time):
    """Probability of at least one match while traversing the arc.

    ``p_edge`` is clamped below one so the result stays informative.
    """
    p = np.asarray(p_edge, dtype=float)
    t = np.asarray(travel_time, dtype=float)
    if (p < 0).any() or (p > 1).any():
        raise ValueError("p_edge must lie in [0, 1]")
    if (t <= 0).any():
        raise ValueError("travel time must be positive")
    clamped = p > PROB_CEILING
    if clamped.any():
        log.debug("clamping %d edge probabilities to %r", int(clamped.sum()), PROB_CEILING)
        p = np.minimum(p, PROB_CEILING)
    out = np.minimum(-np.expm1(t * np.log1p(-p)), PROB_CEILING)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class EdgeProbabilityField:
    query: TripQuery
    src: np.ndarray
    dst: np.ndarray
    p_node_from: np.ndarray
    p_node_to: np.ndarray
    p_edge: np.ndarray
    travel_time: np.ndarray
    prob: np.ndarray
    p_node: dict = field(repr=False, default_factory=dict)

    def __len__(self):
        return len(self.src)

    def prizes(self) -> dict:
        return {(int(i), int(j)): float(p) for i, j, p in zip(self.src, self.dst, self.prob)}

    def rows(self):
        for k in range(len(self.src)):
            yield (
                int(self.src[k]),
                int(self.dst[k]),
                float(self.p_node_from[k]),
                float(self.p_node_to[k]),
                float(self.p_edge[k]),
                float(self.travel_time[k]),
                float(self.prob[k]),
            )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIELD_COLUMNS)
            for row in self.rows():
                w.writerow([row[0], row[1]] + [repr(x) for x in row[2:]])


def build_probability_field(
    q: TripQuery,
    fleet: FleetSnapshot,
    table: DemandTable,
    net: RoadNetwork,
    dm: DistanceMatrix,
    params: ModelParams,
    speed: float,
    alpha: float = math.inf,
) -> EdgeProbabilityField:
    """Pickup probability of every arc a budget-feasible route can use.

    The budget is ``alpha`` times the shortest ``q.origin -> q.dest``
    distance; ``alpha = inf`` keeps every reachable arc.
    """
    if not speed > 0:
        raise ValueError("speed must be positive")
    budget = alpha * dm.dist[q.origin, q.dest]
    arcs = np.flatnonzero(budget_arc_mask(net, dm, q.origin, q.dest, budget))
    src, dst, length = net.src[arcs], net.dst[arcs], net.length[arcs]

    nodes = np.union1d(src, dst)
    lam_hour = attractiveness_field(q, table, dm)
    lam = lam_hour[nodes] * (params.rate_unit_s / 3600.0)
    supply = supply_counts(fleet, dm, params).effective[nodes]
    p_nodes = node_match_probability(lam, supply, params) if len(nodes) else np.zeros(0)
    p_node = dict(zip(nodes.tolist(), np.atleast_1d(p_nodes).tolist()))

    p_from = np.array([p_node[i] for i in src.tolist()], dtype=float)
    p_to = np.array([p_node[j] for j in dst.tolist()], dtype=float)
    p_edge = edge_match_probability(p_from, p_to)
    tt = length / speed
    prob = np.atleast_1d(edge_pickup_probability(p_edge, tt)) if len(arcs) else np.zeros(0)
    return EdgeProbabilityField(
        query=q,
        src=src,
        dst=dst,
        p_node_from=p_from,
        p_node_to=p_to,
        p_edge=p_edge,
        travel_time=tt,
        prob=prob,
        p_node=p_node,
    )
