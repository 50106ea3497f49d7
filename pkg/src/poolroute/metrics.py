"""Service-quality metrics and their recomputation from an event log."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .errors import MalformedLog

LOG_COLUMNS = ("time_s", "event_type", "vehicle_id", "request_id", "node", "detail")
EMPTY_STATES = ("Idle", "ToFirstPickup")


@dataclass
class Metrics:
    issued: int = 0
    completed: int = 0
    cancelled: int = 0
    total_wait_s: float = 0.0
    shared_orders: int = 0
    shared_distance_m: float = 0.0
    empty_distance_m: float = 0.0
    plans: int = 0
    certified_plans: int = 0
    path_ratio_sum: float = 0.0
    warnings: list = field(default_factory=list)

    @property
    def answer_rate(self) -> float:
        return self.completed / self.issued if self.issued else 0.0

    @property
    def avg_wait_s(self) -> float:
        return self.total_wait_s / self.completed if self.completed else 0.0

    @property
    def shared_distance_km(self) -> float:
        return self.shared_distance_m / 1000.0

    @property
    def empty_distance_km(self) -> float:
        return self.empty_distance_m / 1000.0

    @property
    def certified_fraction(self) -> float:
        return self.certified_plans / self.plans if self.plans else 1.0

    @property
    def mean_path_ratio(self) -> float:
        return self.path_ratio_sum / self.plans if self.plans else 1.0

    def finalize(self) -> "Metrics":
        if self.issued == 0 and "no_requests_issued" not in self.warnings:
            self.warnings.append("no_requests_issued")
        return self

    def summary(self) -> dict:
        """Rounded, flat view used for the written summaries."""
        return {
            "answer_rate": round(self.answer_rate, 6),
            "avg_wait_s": round(self.avg_wait_s, 1),
            "cancelled": self.cancelled,
            "certified_plan_fraction": round(self.certified_fraction, 6),
            "completed": self.completed,
            "empty_distance_km": round(self.empty_distance_km, 3),
            "issued": self.issued,
            "mean_path_ratio": round(self.mean_path_ratio, 6),
            "plans": self.plans,
            "shared_distance_km": round(self.shared_distance_km, 3),
            "shared_orders": self.shared_orders,
            "warnings": sorted(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        s = self.summary()
        lines = [
            f"{'metric':<26}{'value':>14}",
            f"{'answer rate (%)':<26}{100 * self.answer_rate:>14.1f}",
            f"{'avg waiting time (s)':<26}{s['avg_wait_s']:>14.1f}",
            f"{'shared orders':<26}{s['shared_orders']:>14d}",
            f"{'total shared dist (km)':<26}{s['shared_distance_km']:>14.3f}",
            f"{'total empty dist (km)':<26}{s['empty_distance_km']:>14.3f}",
            f"{'issued / completed':<26}{str(s['issued']) + ' / ' + str(s['completed']):>14}",
            f"{'cancelled':<26}{s['cancelled']:>14d}",
            f"{'certified plans':<26}{s['certified_plan_fraction']:>14.3f}",
            f"{'planned/shortest length':<26}{s['mean_path_ratio']:>14.4f}",
        ]
        if self.warnings:
            lines.append(f"warnings: {', '.join(sorted(self.warnings))}")
        return "\n".join(lines) + "\n"


def parse_detail(detail: str) -> dict:
    out = {}
    if not detail:
        return out
    for part in detail.split(";"):
        key, sep, value = part.partition("=")
        if not sep:
            raise MalformedLog(f"bad detail field {part!r}")
        out[key] = value
    return out


def read_event_log(source):
    """Yield rows of an event log given a path, an open file or CSV text."""
    if isinstance(source, str) and "\n" in source:
        fh = io.StringIO(source)
    elif hasattr(source, "read"):
        fh = source
    else:
        fh = open(source, newline="", encoding="utf-8")
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != LOG_COLUMNS:
            raise MalformedLog(f"unexpected header {header!r}")
        for row in reader:
            if len(row) != len(LOG_COLUMNS):
                raise MalformedLog(f"line {reader.line_num}: expected {len(LOG_COLUMNS)} fields, got {len(row)}")
            yield row


def compute_metrics(event_log) -> Metrics:
    """Recompute run metrics from a complete event log."""
    m = Metrics()
    waits = {}
    for row in event_log if isinstance(event_log, list) else read_event_log(event_log):
        kind = row[1]
        try:
            info = parse_detail(row[5])
            if kind == "request":
                m.issued += 1
            elif kind == "pickup":
                waits[row[3]] = float(info["wait_s"])
            elif kind == "dropoff":
                m.completed += 1
                m.total_wait_s += waits[row[3]]
                if info["shared"] == "1":
                    m.shared_orders += 1
            elif kind == "cancel":
                m.cancelled += 1
            elif kind == "segment":
                meters = float(info["meters"])
                if info["aboard"] == "2":
                    m.shared_distance_m += meters
                elif info["state"] in EMPTY_STATES:
                    m.empty_distance_m += meters
            elif kind == "plan":
                m.plans += 1
                m.certified_plans += info["certified"] == "1"
                m.path_ratio_sum += float(info["length_m"]) / float(info["shortest_m"])
        except (KeyError, ValueError) as exc:
            raise MalformedLog(f"bad {kind} row {row!r}: {exc}") from None
    return m.finalize()
