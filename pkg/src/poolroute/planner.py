"""Budget-constrained maximum-prize elementary path (arc orienteering).

The solver of record is a best-first branch-and-bound over partial paths.
Ties in the objective are broken by shorter length, then by the
lexicographically smaller node sequence.
"""
from __future__ import annotations

import heapq
import json
import math
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import InstanceTooLarge, MissingArcPrize, Unreachable

OBJ_TIE = 1e-10
LEN_TOL = 1e-6
_LEN_TIE = 1e-9
_BOUND_SLACK = 1e-12
_MU_FACTORS = (1.0, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0, 30.0)


@dataclass(frozen=True)
class SolverConfig:
    max_labels: int = 2_000_000
    time_limit: float | None = None


@dataclass(frozen=True, eq=False)
class PlanInstance:
    """One planning problem.

    ``arcs`` maps ``(i, j)`` to length in meters, ``prizes`` maps arcs to
    pickup probabilities (missing arcs carry no prize).
    """

    origin: int
    dest: int
    budget: float
    arcs: Mapping
    prizes: Mapping
    alpha: float = float("nan")

    def __post_init__(self):
        if self.origin == self.dest:
            raise ValueError("origin and destination must differ")
        for key, p in self.prizes.items():
            if not (0.0 <= p < 1.0) or not math.isfinite(p):
                raise ValueError(f"prize of arc {key} must lie in [0, 1), got {p}")

    @classmethod
    def build(cls, origin, dest, alpha, arcs, prizes, shortest=None):
        """Instance with ``budget = alpha * shortest``; computes the shortest
        distance on ``arcs`` when not supplied."""
        if alpha < 1:
            raise ValueError("alpha must be at least 1")
        if shortest is None:
            shortest = _dijkstra(_adjacency(arcs), origin).get(dest, math.inf)
        return cls(origin, dest, alpha * shortest, dict(arcs), dict(prizes), alpha)

    def prize(self, i, j) -> float:
        return self.prizes.get((i, j), 0.0)

    def to_dict(self) -> dict:
        return {
            "origin": self.origin,
            "dest": self.dest,
            "alpha": self.alpha if math.isfinite(self.alpha) else None,
            "budget": self.budget,
            "arcs": [[i, j, w, self.prizes.get((i, j), 0.0)] for (i, j), w in sorted(self.arcs.items())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlanInstance":
        arcs, prizes = {}, {}
        for i, j, w, p in data["arcs"]:
            arcs[(int(i), int(j))] = float(w)
            if p:
                prizes[(int(i), int(j))] = float(p)
        alpha = data.get("alpha")
        return cls(
            origin=int(data["origin"]),
            dest=int(data["dest"]),
            budget=float(data["budget"]),
            arcs=arcs,
            prizes=prizes,
            alpha=float("nan") if alpha is None else float(alpha),
        )

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PlanInstance":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class PlannedPath:
    nodes: tuple
    length: float
    linear: float
    exact: float
    certified: bool = True
    labels: int = 0

    def arcs(self):
        return list(zip(self.nodes, self.nodes[1:]))


def _adjacency(arcs: Mapping, reverse=False) -> dict:
    adj: dict = {}
    for (i, j), w in arcs.items():
        if reverse:
            i, j = j, i
        adj.setdefault(i, []).append((j, w))
    return adj


def _dijkstra(adj: dict, source) -> dict:
    dist = {source: 0.0}
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj.get(u, ()):
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def _prize_map(field) -> Mapping:
    if hasattr(field, "prizes") and callable(field.prizes):
        return field.prizes()
    if isinstance(field, PlanInstance):
        return field.prizes
    return field


def _path_prizes(nodes, field):
    prizes = _prize_map(field)
    out = []
    for a, b in zip(nodes, nodes[1:]):
        try:
            out.append(prizes[(a, b)])
        except KeyError:
            raise MissingArcPrize(f"no prize for arc ({a},{b})") from None
    return out


def exact_objective(path, field) -> float:
    """Probability of at least one pickup along the path."""
    nodes = path.nodes if isinstance(path, PlannedPath) else path
    miss = 1.0
    for p in _path_prizes(nodes, field):
        miss *= 1.0 - p
    return 1.0 - miss


def linearized_objective(path, field) -> float:
    nodes = path.nodes if isinstance(path, PlannedPath) else path
    total = 0.0
    for p in _path_prizes(nodes, field):
        total += p
    return total


def budget_arc_mask(net, dm, origin, dest, budget) -> np.ndarray:
    """Boolean mask over ``net`` arcs usable by some path within ``budget``."""
    d = dm.dist
    via = d[origin, net.src] + net.length + d[net.dst, dest]
    return via <= budget + LEN_TOL


def budget_reachable_subgraph(inst: PlanInstance, dm=None):
    """Nodes and arcs that can lie on an ``origin -> dest`` path within budget.

    Uses ``dm`` when given, otherwise shortest distances on the instance arcs.
    Returns ``(nodes, arcs)`` as sets.
    """
    if dm is not None:
        def d_from(i):
            return float(dm.dist[inst.origin, i])

        def d_to(i):
            return float(dm.dist[i, inst.dest])
    else:
        fwd = _dijkstra(_adjacency(inst.arcs), inst.origin)
        bwd = _dijkstra(_adjacency(inst.arcs, reverse=True), inst.dest)

        def d_from(i):
            return fwd.get(i, math.inf)

        def d_to(i):
            return bwd.get(i, math.inf)

    limit = inst.budget + LEN_TOL
    arcs = {(i, j) for (i, j), w in inst.arcs.items() if d_from(i) + w + d_to(j) <= limit}
    candidates = {i for a in inst.arcs for i in a}
    nodes = {i for i in candidates if d_from(i) + d_to(i) <= limit}
    return nodes, arcs


def _finish(nodes, inst, certified, labels) -> PlannedPath:
    length = 0.0
    linear = 0.0
    miss = 1.0
    for a, b in zip(nodes, nodes[1:]):
        length += inst.arcs[(a, b)]
        p = inst.prize(a, b)
        linear += p
        miss *= 1.0 - p
    return PlannedPath(tuple(nodes), length, linear, 1.0 - miss, certified, labels)


def _better(val, length, nodes, inc) -> bool:
    """Is the candidate ranked above the incumbent ``(val, length, nodes)``?"""
    if inc is None:
        return True
    if val > inc[0] + OBJ_TIE:
        return True
    if val < inc[0] - OBJ_TIE:
        return False
    if length < inc[1] - _LEN_TIE:
        return True
    if length > inc[1] + _LEN_TIE:
        return False
    return tuple(nodes) < tuple(inc[2])


def plan_route(inst: PlanInstance, config: SolverConfig = SolverConfig()) -> PlannedPath:
    """Maximize the summed arc prizes over elementary ``origin -> dest`` paths
    whose length stays within the budget."""
    O, D, B = inst.origin, inst.dest, inst.budget
    limit = B + LEN_TOL
    fwd = _dijkstra(_adjacency(inst.arcs), O)
    to_dest = _dijkstra(_adjacency(inst.arcs, reverse=True), D)
    if D not in fwd:
        raise Unreachable(f"no path from {O} to {D}")
    if fwd[D] > limit:
        raise Unreachable(f"shortest path {O}->{D} ({fwd[D]:.3f} m) exceeds budget {B:.3f} m")

    # budget-reachable subgraph; an elementary O->D path never re-enters O or leaves D
    adj: dict = {}
    arc_list = []
    max_ratio = 0.0
    prize_total = 0.0
    for (i, j), w in sorted(inst.arcs.items()):
        if j == O or i == D:
            continue
        if fwd.get(i, math.inf) + w + to_dest.get(j, math.inf) > limit:
            continue
        p = inst.prize(i, j)
        adj.setdefault(i, []).append((j, w, p, len(arc_list)))
        arc_list.append((i, j, w, p))
        if p > 0:
            max_ratio = max(max_ratio, p / w)
            prize_total += p
    bit = {u: 1 << k for k, u in enumerate(sorted({O, D} | {a[0] for a in arc_list} | {a[1] for a in arc_list}))}

    # Lagrangian bounds: for mu >= max prize/length the reduced costs
    # mu*w - p are non-negative, so remaining prize <= mu*R - h_mu(u)
    heads = []
    if max_ratio > 0:
        for f in _MU_FACTORS:
            mu = max_ratio * f
            radj: dict = {}
            for i, j, w, p in arc_list:
                radj.setdefault(j, []).append((i, max(mu * w - p, 0.0)))
            heads.append((mu, _dijkstra(radj, D)))
    walk = _walk_bound_table(arc_list, D, limit) if max_ratio > 0 else None

    def bound(u, residual, arc=None):
        best = prize_total
        for mu, h in heads:
            b = mu * residual - h.get(u, math.inf)
            if b < best:
                best = b
        if walk is not None and arc is not None:
            table, unit = walk
            b = table[int(residual / unit), arc]
            if b < best:
                best = b
        return best + _BOUND_SLACK if heads else 0.0

    # incumbent: a shortest path through the subgraph
    pred: dict = {}
    for i, j, w, _ in arc_list:
        pred.setdefault(j, []).append((i, w))
    sp = [D]
    while sp[-1] != O:
        v = sp[-1]
        sp.append(min(pred[v], key=lambda iw: (fwd[iw[0]] + iw[1], iw[0]))[0])
    sp.reverse()
    first = _finish(sp, inst, True, 0)
    inc = (first.linear, first.length, first.nodes)

    deadline = None if config.time_limit is None else time.perf_counter() + config.time_limit
    labels = 0
    certified = True
    heap = [(-bound(O, limit), 0.0, (O,), 0.0, bit[O])]
    while heap:
        neg_ub, length, nodes, value, mask = heapq.heappop(heap)
        ub = -neg_ub
        if ub < inc[0] - OBJ_TIE:
            break
        if ub <= inc[0] + OBJ_TIE and not _may_tie(length, nodes, to_dest, inc):
            continue
        labels += 1
        if labels > config.max_labels or (
            deadline is not None and labels % 1024 == 0 and time.perf_counter() > deadline
        ):
            certified = False
            break
        u = nodes[-1]
        for v, w, p, e in adj.get(u, ()):
            vb = bit[v]
            if mask & vb:
                continue
            nl = length + w
            if nl + to_dest[v] > limit:
                continue
            nv = value + p
            nn = nodes + (v,)
            if v == D:
                if _better(nv, nl, nn, inc):
                    inc = (nv, nl, nn)
                continue
            nub = nv + bound(v, limit - nl, e)
            if nub < inc[0] - OBJ_TIE:
                continue
            heapq.heappush(heap, (-nub, nl, nn, nv, mask | vb))
    return _finish(inc[2], inst, certified, labels)


def _walk_bound_table(arc_list, dest, limit, max_units=4096):
    """Best prize of a walk that stops on reaching ``dest``, never turns
    straight back, and fits in the residual length.

    Lengths are measured in whole units of the shortest arc, rounded down, so
    every elementary path remains feasible for the walk.  Returns
    ``(table, unit)`` with ``table[r, e]`` the best continuation after
    traversing arc ``e`` with ``r`` units left, or ``None`` when the budget
    spans too many units.
    """
    m = len(arc_list)
    if m == 0:
        return None
    src = np.array([a[0] for a in arc_list])
    dst = np.array([a[1] for a in arc_list])
    length = np.array([a[2] for a in arc_list])
    prize = np.array([a[3] for a in arc_list])
    unit = float(length.min())
    n_units = int(limit / unit)
    if n_units > max_units:
        return None
    units = np.floor(length / unit).astype(np.int64)

    # transitions e -> f: f leaves the head of e and does not return to e's tail
    by_src: dict = {}
    for f in range(m):
        by_src.setdefault(int(src[f]), []).append(f)
    first, second = [], []
    for e in range(m):
        if dst[e] == dest:
            continue
        for f in by_src.get(int(dst[e]), ()):
            if dst[f] != src[e]:
                first.append(e)
                second.append(f)
    first = np.array(first, dtype=np.int64)
    second = np.array(second, dtype=np.int64)
    ends = dst == dest

    table = np.full((n_units + 1, m), -np.inf)
    table[:, ends] = 0.0
    for r in range(n_units + 1):
        left = r - units[second]
        ok = left >= 0
        if not ok.any():
            continue
        vals = prize[second[ok]] + table[left[ok], second[ok]]
        row = np.full(m, -np.inf)
        np.maximum.at(row, first[ok], vals)
        row[ends] = 0.0
        if r > 0:
            row = np.maximum(row, table[r - 1])
        table[r] = row
    return table, unit


def _may_tie(length, nodes, to_dest, inc) -> bool:
    """Can a completion of this prefix beat an incumbent it can at most tie?"""
    shortest_finish = length + to_dest[nodes[-1]]
    if shortest_finish < inc[1] - _LEN_TIE:
        return True
    if shortest_finish > inc[1] + _LEN_TIE:
        return False
    return nodes <= inc[2][: len(nodes)]


def enumerate_optimal(inst: PlanInstance, max_nodes: int = 25) -> PlannedPath:
    """Exhaustive depth-first enumeration of budget-feasible elementary paths.

    Testing oracle for :func:`plan_route`; refuses instances whose
    budget-reachable subgraph has more than ``max_nodes`` nodes.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import shortest_path

    ids = sorted({i for a in inst.arcs for i in a} | {inst.origin, inst.dest})
    local = {u: k for k, u in enumerate(ids)}
    rows = [local[i] for i, _ in inst.arcs]
    cols = [local[j] for _, j in inst.arcs]
    mat = csr_matrix((list(inst.arcs.values()), (rows, cols)), shape=(len(ids), len(ids)))
    # Bellman-Ford on the transpose gives distances into dest
    to_d = shortest_path(mat.T.tocsr(), method="BF", indices=[local[inst.dest]], directed=True).ravel()
    from_o = shortest_path(mat, method="BF", indices=[local[inst.origin]], directed=True).ravel()

    limit = inst.budget + LEN_TOL
    keep = {u for u in ids if from_o[local[u]] + to_d[local[u]] <= limit}
    if len(keep) > max_nodes:
        raise InstanceTooLarge(f"{len(keep)} nodes in budget-reachable subgraph (limit {max_nodes})")
    if inst.dest not in keep:
        raise Unreachable(f"no path from {inst.origin} to {inst.dest} within budget")

    succ: dict = {}
    for (i, j), w in inst.arcs.items():
        if i in keep and j in keep:
            succ.setdefault(i, []).append((j, w))

    found = []
    stack = [(inst.origin, (inst.origin,), 0.0, 0.0)]
    while stack:
        u, path, length, value = stack.pop()
        if u == inst.dest:
            found.append((value, length, path))
            continue
        for v, w in succ.get(u, ()):
            if v in path:
                continue
            nl = length + w
            if nl + to_d[local[v]] > limit:
                continue
            stack.append((v, path + (v,), nl, value + inst.prize(u, v)))

    top = max(f[0] for f in found)
    tied = [f for f in found if f[0] >= top - OBJ_TIE]
    shortest = min(f[1] for f in tied)
    tied = [f for f in tied if f[1] <= shortest + _LEN_TIE]
    best = min(tied, key=lambda f: f[2])
    return _finish(best[2], inst, True, len(found))
