"""Time-binned Poisson OD demand and the pooling-aware attractiveness field."""
from __future__ import annotations

import bisect
import csv
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import BinNotCovered, MalformedRecord, Unreachable
from .network import DistanceMatrix

log = logging.getLogger(__name__)

DEMAND_COLUMNS = ("bin_start_s", "bin_end_s", "origin", "dest", "rate_per_hour")

# counts terms skipped because the pooled distance was zero
diagnostics = Counter()


@dataclass(frozen=True)
class TripQuery:
    origin: int
    dest: int
    time: float = 0.0

    def __post_init__(self):
        if self.origin == self.dest:
            raise ValueError(f"trip origin equals destination ({self.origin})")


@dataclass(frozen=True, eq=False)
class DemandBin:
    start: float
    end: float
    origins: np.ndarray
    dests: np.ndarray
    rates: np.ndarray  # requests per hour


class DemandTable:
    """Per-bin sparse OD rates in requests/hour.

    Bins are ``[start, end)`` intervals in seconds, contiguous and sorted.
    """

    def __init__(self, bins: Sequence[DemandBin]):
        bins = sorted(bins, key=lambda b: b.start)
        for a, b in zip(bins, bins[1:]):
            if a.end != b.start:
                raise MalformedRecord(f"demand bins not contiguous: [{a.start},{a.end}) then [{b.start},{b.end})")
        for b in bins:
            if not b.end > b.start:
                raise MalformedRecord(f"empty demand bin [{b.start},{b.end})")
            if (b.rates < 0).any():
                raise MalformedRecord("negative demand rate")
            if (b.origins == b.dests).any():
                raise MalformedRecord("demand entry with origin == destination")
        self.bins = tuple(bins)
        self._starts = [b.start for b in self.bins]

    @classmethod
    def from_records(cls, records: Iterable[Sequence], line_numbers=None) -> "DemandTable":
        """Build from ``(bin_start_s, bin_end_s, origin, dest, rate_per_hour)`` rows."""
        grouped: dict = {}
        for k, rec in enumerate(records):
            line = line_numbers[k] if line_numbers is not None else k + 1
            try:
                t0, t1 = float(rec[0]), float(rec[1])
                i, j = int(rec[2]), int(rec[3])
                rate = float(rec[4])
            except (TypeError, ValueError, IndexError):
                raise MalformedRecord(f"bad demand row {tuple(rec)!r}", line) from None
            if i == j:
                raise MalformedRecord(f"origin equals destination ({i})", line)
            if not rate >= 0:
                raise MalformedRecord(f"rate must be non-negative, got {rate}", line)
            entries = grouped.setdefault((t0, t1), {})
            if (i, j) in entries:
                raise MalformedRecord(f"duplicate entry ({i},{j}) in bin [{t0},{t1})", line)
            entries[(i, j)] = rate
        bins = []
        for (t0, t1), entries in grouped.items():
            keys = sorted(entries)
            bins.append(
                DemandBin(
                    start=t0,
                    end=t1,
                    origins=np.array([k[0] for k in keys], dtype=np.int64),
                    dests=np.array([k[1] for k in keys], dtype=np.int64),
                    rates=np.array([entries[k] for k in keys], dtype=float),
                )
            )
        return cls(bins)

    @property
    def horizon(self) -> tuple[float, float]:
        if not self.bins:
            return (0.0, 0.0)
        return (self.bins[0].start, self.bins[-1].end)

    def bin_at(self, t: float) -> DemandBin:
        k = bisect.bisect_right(self._starts, t) - 1
        if k < 0 or t >= self.bins[k].end:
            raise BinNotCovered(f"no demand bin covers t={t}")
        return self.bins[k]

    def rate(self, t: float, i: int, j: int) -> float:
        b = self.bin_at(t)
        hit = np.flatnonzero((b.origins == i) & (b.dests == j))
        return float(b.rates[hit[0]]) if len(hit) else 0.0

    def scaled(self, factor: float) -> "DemandTable":
        return DemandTable(
            [DemandBin(b.start, b.end, b.origins, b.dests, b.rates * factor) for b in self.bins]
        )

    def records(self):
        for b in self.bins:
            for i, j, r in zip(b.origins, b.dests, b.rates):
                yield b.start, b.end, int(i), int(j), float(r)


def read_demand_csv(path) -> DemandTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in DEMAND_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MalformedRecord(f"{path}: missing columns {missing}", 1)
        rows, lines = [], []
        for row in reader:
            rows.append(tuple(row[c] for c in DEMAND_COLUMNS))
            lines.append(reader.line_num)
    try:
        return DemandTable.from_records(rows, line_numbers=lines)
    except MalformedRecord as exc:
        raise MalformedRecord(f"{path}: {exc}") from None


def write_demand_csv(table: DemandTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEMAND_COLUMNS)
        for t0, t1, i, j, r in table.records():
            w.writerow([repr(t0), repr(t1), i, j, repr(r)])


def pooled_distance(O: int, D: int, i: int, j: int, dm: DistanceMatrix) -> float:
    """Shortest combined distance when trip ``O->D`` pools with ``i->j``.

    Both orders pick up ``i`` second; they differ in who is dropped first.
    """
    d = dm.dist
    first_on_last_off = d[O, i] + d[i, j] + d[j, D]
    first_on_first_off = d[O, i] + d[i, D] + d[D, j]
    best = min(first_on_last_off, first_on_first_off)
    if not np.isfinite(best):
        raise Unreachable(f"no pooled route for ({O}->{D}) with ({i}->{j})")
    return float(best)


def attractiveness(q: TripQuery, i: int, table: DemandTable, dm: DistanceMatrix) -> float:
    """Pooling-weighted arrival rate at node ``i`` for trip ``q`` (requests/hour)."""
    b = table.bin_at(q.time)
    d = dm.dist
    direct = d[q.origin, q.dest]
    total = 0.0
    for k in np.flatnonzero(b.origins == i):
        j = int(b.dests[k])
        rate = float(b.rates[k])
        if rate == 0.0:
            continue
        try:
            lp = pooled_distance(q.origin, q.dest, i, j, dm)
        except Unreachable:
            continue
        if not np.isfinite(d[i, j]) or not np.isfinite(direct):
            continue
        if lp <= 0.0:
            diagnostics["zero_pooled_distance"] += 1
            continue
        total += rate * (direct + d[i, j]) / (2.0 * lp)
    return total


def attractiveness_field(q: TripQuery, table: DemandTable, dm: DistanceMatrix) -> np.ndarray:
    """Vectorized :func:`attractiveness` for every node at once."""
    n = dm.dist.shape[0]
    b = table.bin_at(q.time)
    if len(b.rates) == 0:
        return np.zeros(n)
    d = dm.dist
    O, D = q.origin, q.dest
    i, j, rate = b.origins, b.dests, b.rates
    lp = np.minimum(d[O, i] + d[i, j] + d[j, D], d[O, i] + d[i, D] + d[D, j])
    num = d[O, D] + d[i, j]
    ok = np.isfinite(lp) & np.isfinite(num) & (rate > 0)
    zero = ok & (lp <= 0)
    if zero.any():
        diagnostics["zero_pooled_distance"] += int(zero.sum())
        ok &= ~zero
    w = np.zeros_like(rate)
    w[ok] = rate[ok] * num[ok] / (2.0 * lp[ok])
    return np.bincount(i, weights=w, minlength=n)[:n]


def sample_arrivals(table: DemandTable, t: float, dt: float, rng: np.random.Generator) -> list[TripQuery]:
    """Draw the requests issued in ``[t, t + dt)``, sorted by issue time.

    Each OD pair gets an independent Poisson count with mean ``rate * dt / 3600``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    b = table.bin_at(t)
    if t + dt > b.end + 1e-9:
        raise BinNotCovered(f"[{t}, {t + dt}) straddles the bin ending at {b.end}")
    if len(b.rates) == 0:
        return []
    counts = rng.poisson(b.rates * (dt / 3600.0))
    hit = np.flatnonzero(counts)
    if len(hit) == 0:
        return []
    reps = counts[hit]
    origins = np.repeat(b.origins[hit], reps)
    dests = np.repeat(b.dests[hit], reps)
    times = t + rng.random(len(origins)) * dt
    order = np.lexsort((dests, origins, times))
    return [TripQuery(int(origins[k]), int(dests[k]), float(times[k])) for k in order]


def directional_demand(
    dm: DistanceMatrix,
    hourly_totals: Sequence[float],
    corridors: Sequence[Sequence[int]] = (),
    corridor_share: float = 0.0,
    bin_length: float = 3600.0,
    min_trip_m: float = 0.0,
) -> DemandTable:
    """Synthetic demand: a uniform background plus one-way corridor flows.

    ``hourly_totals[k]`` is the total request rate (per hour) of bin ``k``.
    A corridor is a node sequence; its OD pairs run forward along it only,
    so the flow is directional.  ``corridor_share`` of each bin's total goes
    to corridor pairs, the rest is spread evenly over all other OD pairs at
    least ``min_trip_m`` apart.
    """
    if not 0 <= corridor_share <= 1:
        raise ValueError("corridor_share must lie in [0, 1]")
    n = dm.dist.shape[0]
    d = dm.dist
    along = set()
    for seq in corridors:
        for a in range(len(seq)):
            for c in range(a + 1, len(seq)):
                if seq[a] != seq[c] and d[seq[a], seq[c]] >= min_trip_m:
                    along.add((seq[a], seq[c]))
    background = [
        (i, j)
        for i in range(n)
        for j in range(n)
        if i != j and np.isfinite(d[i, j]) and d[i, j] >= min_trip_m and (i, j) not in along
    ]
    along = sorted(along)
    if corridor_share > 0 and not along:
        raise ValueError("corridor_share > 0 but no corridor OD pairs")
    records = []
    for k, total in enumerate(hourly_totals):
        t0, t1 = k * bin_length, (k + 1) * bin_length
        share = corridor_share if along else 0.0
        if along and share > 0:
            per = total * share / len(along)
            records += [(t0, t1, i, j, per) for i, j in along]
        if background and share < 1:
            per = total * (1 - share) / len(background)
            records += [(t0, t1, i, j, per) for i, j in background]
        if not records or records[-1][0] != t0:
            # keep empty bins so the horizon stays covered
            records.append((t0, t1, 0, 1 if n > 1 else 0, 0.0))
    return DemandTable.from_records(records)
