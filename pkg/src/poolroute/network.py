"""Road network, all-pairs shortest distances and the speed model.

Lengths are meters, speeds m/s, times seconds.  Node ids are dense integers
``0..n-1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateArc,
    MalformedRecord,
    NonPositiveLength,
    NonPositiveSpeed,
    SelfLoop,
)

NETWORK_COLUMNS = ("from", "to", "length_m")


@dataclass(frozen=True, eq=False)
class RoadNetwork:
    """Directed road graph with per-arc lengths.

    Arcs are stored in insertion order; ``arc_index[(i, j)]`` maps an ordered
    pair to its position in ``src``/``dst``/``length``.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    length: np.ndarray
    arc_index: dict = field(repr=False)
    out_arcs: tuple = field(repr=False)
    in_arcs: tuple = field(repr=False)
    coords: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_arcs(self) -> int:
        return len(self.src)

    def arcs(self):
        """Iterate ``(i, j, length)`` over all arcs."""
        for k in range(self.n_arcs):
            yield int(self.src[k]), int(self.dst[k]), float(self.length[k])

    def arc_length(self, i: int, j: int) -> float:
        return float(self.length[self.arc_index[(i, j)]])

    def has_arc(self, i: int, j: int) -> bool:
        return (i, j) in self.arc_index

    def successors(self, i: int) -> list[int]:
        return [int(self.dst[k]) for k in self.out_arcs[i]]

    def path_length(self, path: Sequence[int]) -> float:
        total = 0.0
        for a, b in zip(path, path[1:]):
            total += self.arc_length(a, b)
        return total


def load_network(edge_records: Iterable[Sequence], coords=None, line_numbers=None) -> RoadNetwork:
    """Build a validated :class:`RoadNetwork` from ``(from, to, length_m)`` rows.

    ``line_numbers`` optionally maps each record to its source line for
    error messages; records are numbered from 1 otherwise.
    """
    src, dst, length = [], [], []
    seen = {}
    for k, rec in enumerate(edge_records):
        lineno = line_numbers[k] if line_numbers is not None else k + 1
        if len(rec) < 3:
            raise MalformedRecord(f"expected 3 fields, got {len(rec)}", lineno)
        try:
            i, j = int(rec[0]), int(rec[1])
            w = float(rec[2])
        except (TypeError, ValueError) as exc:
            raise MalformedRecord(f"cannot parse {tuple(rec)!r}: {exc}", lineno) from None
        if i < 0 or j < 0:
            raise MalformedRecord(f"negative node id in {tuple(rec)!r}", lineno)
        if i == j:
            raise SelfLoop(f"self-loop on node {i}", lineno)
        if not math.isfinite(w) or w <= 0:
            raise NonPositiveLength(f"arc ({i},{j}) has length {w}", lineno)
        if (i, j) in seen:
            raise DuplicateArc(f"arc ({i},{j}) already defined on line {seen[(i, j)]}", lineno)
        seen[(i, j)] = lineno
        src.append(i)
        dst.append(j)
        length.append(w)
    if not src:
        raise MalformedRecord("network has no arcs")

    n = max(max(src), max(dst)) + 1
    present = np.zeros(n, dtype=bool)
    present[src] = True
    present[dst] = True
    if not present.all():
        missing = np.flatnonzero(~present)[:5].tolist()
        raise MalformedRecord(f"node ids must be 0..{n - 1} without gaps; missing {missing}")

    out_arcs = [[] for _ in range(n)]
    in_arcs = [[] for _ in range(n)]
    for k, (i, j) in enumerate(zip(src, dst)):
        out_arcs[i].append(k)
        in_arcs[j].append(k)
    if coords is not None:
        coords = np.asarray(coords, dtype=float)
        if coords.shape != (n, 2):
            raise MalformedRecord(f"coords must have shape ({n}, 2), got {coords.shape}")
    return RoadNetwork(
        n_nodes=n,
        src=np.asarray(src, dtype=np.int64),
        dst=np.asarray(dst, dtype=np.int64),
        length=np.asarray(length, dtype=float),
        arc_index={(i, j): k for k, (i, j) in enumerate(zip(src, dst))},
        out_arcs=tuple(tuple(a) for a in out_arcs),
        in_arcs=tuple(tuple(a) for a in in_arcs),
        coords=coords,
    )


def read_network_csv(path) -> RoadNetwork:
    """Read a ``from,to,length_m`` file.  Optional ``x,y`` columns give the
    coordinates of the ``from`` node and are kept for export only."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in NETWORK_COLUMNS if c not in header]
        if missing:
            raise MalformedRecord(f"{path}: missing columns {missing}", 1)
        has_xy = "x" in header and "y" in header
        rows, xy = [], {}
        for row in reader:
            # DictReader line numbers count the header
            line = reader.line_num
            try:
                rec = (int(row["from"]), int(row["to"]), float(row["length_m"]))
            except (TypeError, ValueError):
                raise MalformedRecord(f"{path}: bad row {row!r}", line) from None
            rows.append((line, rec))
            if has_xy and row["x"] not in ("", None):
                xy[rec[0]] = (float(row["x"]), float(row["y"]))

    records = [r for _, r in rows]
    lines = [line for line, _ in rows]
    net = load_network(records, line_numbers=lines)
    if has_xy and len(xy) == net.n_nodes:
        net = load_network(records, coords=[xy[i] for i in range(net.n_nodes)], line_numbers=lines)
    return net


def write_network_csv(net: RoadNetwork, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if net.coords is not None:
            w.writerow(NETWORK_COLUMNS + ("x", "y"))
            for i, j, length in net.arcs():
                x, y = net.coords[i]
                w.writerow([i, j, repr(length), repr(float(x)), repr(float(y))])
        else:
            w.writerow(NETWORK_COLUMNS)
            for i, j, length in net.arcs():
                w.writerow([i, j, repr(length)])


def grid_network(rows: int, cols: int, edge_length: float = 200.0) -> RoadNetwork:
    """Manhattan grid with bidirectional arcs; node ``r * cols + c``."""
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise ValueError("grid needs at least two nodes")
    records = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            if c + 1 < cols:
                records += [(u, u + 1, edge_length), (u + 1, u, edge_length)]
            if r + 1 < rows:
                records += [(u, u + cols, edge_length), (u + cols, u, edge_length)]
    coords = [(c * edge_length, r * edge_length) for r in range(rows) for c in range(cols)]
    return load_network(records, coords=coords)


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """All-pairs shortest distances with a next-hop table.

    ``nxt[i, j]`` is the node after ``i`` on one shortest ``i -> j`` path,
    ``-1`` when ``j`` is unreachable.
    """

    dist: np.ndarray
    nxt: np.ndarray

    def __call__(self, a: int, b: int) -> float:
        return float(self.dist[a, b])

    def path(self, a: int, b: int) -> list[int]:
        if a == b:
            return [a]
        if self.nxt[a, b] < 0:
            return []
        out = [a]
        while a != b:
            a = int(self.nxt[a, b])
            out.append(a)
        return out


def all_pairs_shortest(net: RoadNetwork) -> DistanceMatrix:
    """Floyd-Warshall over the whole network, vectorized over the inner loops."""
    n = net.n_nodes
    dist = np.full((n, n), np.inf)
    nxt = np.full((n, n), -1, dtype=np.int64)
    dist[net.src, net.dst] = net.length
    nxt[net.src, net.dst] = net.dst
    idx = np.arange(n)
    dist[idx, idx] = 0.0
    nxt[idx, idx] = idx
    for k in range(n):
        cand = dist[:, k, None] + dist[None, k, :]
        better = cand < dist
        if better.any():
            dist = np.where(better, cand, dist)
            nxt = np.where(better, nxt[:, k, None], nxt)
    dist.setflags(write=False)
    nxt.setflags(write=False)
    return DistanceMatrix(dist=dist, nxt=nxt)


def edge_travel_time(length_m: float, speed: float) -> float:
    if not speed > 0:
        raise NonPositiveSpeed(f"speed must be positive, got {speed}")
    return length_m / speed


@dataclass(frozen=True)
class MfdCurve:
    """Linear speed-accumulation curve with a positive speed floor."""

    v_free: float = 8.33
    n_jam: float = 2000.0
    min_speed_fraction: float = 0.05

    def __post_init__(self):
        if self.v_free <= 0 or self.n_jam <= 0:
            raise ValueError("v_free and n_jam must be positive")
        if not 0 < self.min_speed_fraction <= 1:
            raise ValueError("min_speed_fraction must lie in (0, 1]")


def mfd_speed(curve: MfdCurve, accumulation: float) -> float:
    if accumulation < 0:
        raise ValueError("accumulation must be non-negative")
    frac = max(1.0 - accumulation / curve.n_jam, curve.min_speed_fraction)
    return curve.v_free * frac
