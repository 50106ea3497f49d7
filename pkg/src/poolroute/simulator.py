"""Fixed-step fleet simulation with first-come-first-served pooled matching.

Lifecycle of a vehicle::

    Idle -> ToFirstPickup -> PartiallyOccupied -> Idle                (solo)
                                  |
                                  +-> ToSecondPickup -> DualOccupied
                                        -> DroppingLast -> Idle          (pooled)

Only partially occupied vehicles are routed by the selected policy; every
other leg follows a shortest path.
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .demand import DemandTable, TripQuery, sample_arrivals
from .errors import BinNotCovered, Unreachable
from .match_model import (
    DROP,
    EMPTY,
    PARTIAL,
    UNCOUNTED,
    FleetSnapshot,
    ModelParams,
    build_probability_field,
)
from .metrics import LOG_COLUMNS, Metrics
from .network import DistanceMatrix, MfdCurve, RoadNetwork, mfd_speed
from .planner import LEN_TOL, PlanInstance, SolverConfig, plan_route

log = logging.getLogger(__name__)


class Policy(str, enum.Enum):
    PROPOSED = "proposed"
    SHORTEST = "shortest"
    NOSHARE = "noshare"


class State(str, enum.Enum):
    IDLE = "Idle"
    TO_FIRST_PICKUP = "ToFirstPickup"
    PARTIAL = "PartiallyOccupied"
    TO_SECOND_PICKUP = "ToSecondPickup"
    DUAL = "DualOccupied"
    DROPPING_LAST = "DroppingLast"


SUPPLY_CATEGORY = {
    State.IDLE: EMPTY,
    State.DROPPING_LAST: DROP,
    State.PARTIAL: PARTIAL,
    State.TO_FIRST_PICKUP: UNCOUNTED,
    State.TO_SECOND_PICKUP: UNCOUNTED,
    State.DUAL: UNCOUNTED,
}
ABOARD = {
    State.IDLE: 0,
    State.TO_FIRST_PICKUP: 0,
    State.PARTIAL: 1,
    State.TO_SECOND_PICKUP: 1,
    State.DUAL: 2,
    State.DROPPING_LAST: 1,
}


class Status(str, enum.Enum):
    WAITING = "Waiting"
    MATCHED = "Matched"
    PICKED_UP = "PickedUp"
    COMPLETED = "Completed"
    CANCELLED = "Cancelled"


@dataclass(frozen=True)
class SimulationConfig:
    alpha: float = 1.2
    zeta: float = 1.0
    eta: float = 0.001
    t_wait: float = 300.0
    t_match: float = 60.0
    fleet_size: int = 100
    dt: float = 1.0
    duration: float = 10800.0
    seed: int = 0
    policy: Policy = Policy.PROPOSED
    share_willingness: float = 1.0
    rate_unit_s: float = 1.0
    background_accumulation: float = 0.0
    mfd: MfdCurve = MfdCurve()
    solver: SolverConfig = SolverConfig()
    field_snapshots: int = 0

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be at least 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.duration < 0 or self.fleet_size < 0:
            raise ValueError("duration and fleet size must be non-negative")
        if not 0 <= self.share_willingness <= 1:
            raise ValueError("share_willingness must lie in [0, 1]")
        object.__setattr__(self, "policy", Policy(self.policy))

    def model_params(self, speed: float) -> ModelParams:
        return ModelParams(
            zeta=self.zeta, eta=self.eta, match_radius=self.t_wait * speed, rate_unit_s=self.rate_unit_s
        )


@dataclass
class Request:
    id: int
    origin: int
    dest: int
    issue_time: float
    willing: bool
    deadline: float = math.inf  # issue time + matching window
    status: Status = Status.WAITING
    vehicle: Optional[int] = None
    pickup_time: Optional[float] = None
    ride_start: float = 0.0  # vehicle odometer at pickup
    shared: bool = False


@dataclass
class Vehicle:
    id: int
    node: int
    state: State = State.IDLE
    route: list = field(default_factory=list)  # upcoming nodes, next hop first
    offset: float = 0.0  # meters past ``node`` along the arc to route[0]
    passengers: list = field(default_factory=list)  # request ids aboard
    target: Optional[int] = None  # request id being fetched
    drop_order: list = field(default_factory=list)
    committed: tuple = ()
    odometer: float = 0.0
    segment_m: float = 0.0

    @property
    def position(self) -> int:
        """Node the vehicle acts from: downstream node when mid-arc."""
        return self.route[0] if self.offset > 0 else self.node


@dataclass(frozen=True)
class PoolCheck:
    feasible: bool
    drop_b_first: bool
    total_m: float
    a_ride_m: float
    b_ride_m: float


def detour_feasible(a, b, dm: DistanceMatrix, alpha: float, a_ridden: float = 0.0, to_pickup=None) -> PoolCheck:
    """Can trip ``b`` join a vehicle already carrying ``a``?

    ``a`` and ``b`` expose ``origin``/``dest``.  ``a_ridden`` is how far
    ``a`` has already travelled aboard and ``to_pickup`` the distance from
    the vehicle's match point to ``b.origin`` (defaults to ``a.origin``
    as match point).  Both drop orders are checked against each passenger's
    own ``alpha`` detour bound; the feasible one with the smaller remaining
    distance wins, dropping ``b`` first on ties.
    """
    d = dm.dist
    if to_pickup is None:
        to_pickup = float(d[a.origin, b.origin])
    direct_a = float(d[a.origin, a.dest])
    direct_b = float(d[b.origin, b.dest])
    ob_db, db_da = float(d[b.origin, b.dest]), float(d[b.dest, a.dest])
    ob_da, da_db = float(d[b.origin, a.dest]), float(d[a.dest, b.dest])

    options = []
    # drop b first: O^B -> D^B -> D^A
    a_ride = a_ridden + to_pickup + ob_db + db_da
    options.append(PoolCheck(
        a_ride <= alpha * direct_a + LEN_TOL and ob_db <= alpha * direct_b + LEN_TOL,
        True, to_pickup + ob_db + db_da, a_ride, ob_db,
    ))
    # drop a first: O^B -> D^A -> D^B
    b_ride = ob_da + da_db
    options.append(PoolCheck(
        a_ridden + to_pickup + ob_da <= alpha * direct_a + LEN_TOL and b_ride <= alpha * direct_b + LEN_TOL,
        False, to_pickup + ob_da + da_db, a_ridden + to_pickup + ob_da, b_ride,
    ))
    ok = [o for o in options if o.feasible and math.isfinite(o.total_m)]
    if not ok:
        return replace(options[0], feasible=False)
    return min(ok, key=lambda o: (o.total_m, not o.drop_b_first))


class EventLog:
    """Append-only event rows; optionally streamed to a CSV file."""

    def __init__(self, path=None):
        self.rows: list = []
        self._fh = None
        self._writer = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(LOG_COLUMNS)

    def emit(self, time, kind, vehicle="", request="", node="", detail=""):
        row = [repr(float(time)), kind, str(vehicle), str(request), str(node), detail]
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(row)

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def to_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        lines += [",".join(r) for r in self.rows]
        return "\n".join(lines) + "\n"


def _fmt(**kw) -> str:
    parts = []
    for k, v in kw.items():
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, bool):
            v = int(v)
        parts.append(f"{k}={v}")
    return ";".join(parts)


class Simulation:
    """Owns all mutable state of one run; advance it with :meth:`tick`."""

    def __init__(
        self,
        net: RoadNetwork,
        dm: DistanceMatrix,
        demand: DemandTable,
        config: SimulationConfig,
        event_log: EventLog | None = None,
        initial_nodes=None,
    ):
        self.net = net
        self.dm = dm
        self.demand = demand
        self.config = config
        self.log = event_log if event_log is not None else EventLog()
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self.demand_rng = np.random.default_rng(seeds[0])
        self.share_rng = np.random.default_rng(seeds[1])
        if initial_nodes is None:
            initial_nodes = np.random.default_rng(seeds[2]).integers(0, net.n_nodes, size=config.fleet_size)
        self.vehicles = [Vehicle(id=k, node=int(n)) for k, n in enumerate(initial_nodes)]
        self.requests: dict = {}
        self.waiting: list = []
        self.step = 0
        self.time = 0.0
        self.speed = config.mfd.v_free
        self.metrics = Metrics()
        self.plans: list = []  # (vehicle, request, planned path, shortest length)
        self.fields: list = []  # captured probability fields
        self._warned_horizon = False
        self._finished = False

    # -- public API --------------------------------------------------------

    def run(self) -> Metrics:
        n_steps = int(round(self.config.duration / self.config.dt))
        for _ in range(n_steps):
            self.tick()
        return self.finish()

    def finish(self) -> Metrics:
        if not self._finished:
            for v in self.vehicles:
                self._close_segment(v, self.time, reason="end")
            self.log.emit(self.time, "end", detail=_fmt(steps=self.step))
            self._finished = True
        return self.metrics.finalize()

    def tick(self) -> None:
        cfg = self.config
        t0 = self.time
        t1 = (self.step + 1) * cfg.dt
        self.speed = self.current_speed()
        for q in self._sample(t0, t1 - t0):
            self._issue(q)
        self.match_requests()
        for v in self.vehicles:
            if v.state is not State.IDLE:
                self._advance(v, t0, t1)
        self._expire(t1)
        self.step += 1
        self.time = t1

    def current_speed(self) -> float:
        moving = sum(v.state is not State.IDLE for v in self.vehicles)
        return mfd_speed(self.config.mfd, moving + self.config.background_accumulation)

    def snapshot(self, exclude: int | None = None) -> FleetSnapshot:
        vs = [v for v in self.vehicles if v.id != exclude]
        return FleetSnapshot.from_lists(
            positions=[v.position for v in vs],
            categories=[SUPPLY_CATEGORY[v.state] for v in vs],
            routes=[v.committed for v in vs if v.state is State.PARTIAL],
            vehicle_ids=[v.id for v in vs],
        )

    def probability_field(self, origin: int, dest: int, exclude: int | None = None):
        q = TripQuery(origin, dest, self.time)
        return build_probability_field(
            q, self.snapshot(exclude), self.demand, self.net, self.dm,
            self.config.model_params(self.speed), self.speed, self.config.alpha,
        )

    def submit(self, origin: int, dest: int, time: float | None = None) -> Request:
        """Issue a request outside the demand process (scripted scenarios)."""
        self._issue(TripQuery(origin, dest, self.time if time is None else time))
        return self.requests[len(self.requests) - 1]

    def in_flight(self) -> int:
        return sum(r.status in (Status.WAITING, Status.MATCHED, Status.PICKED_UP) for r in self.requests.values())

    # -- demand ------------------------------------------------------------

    def _sample(self, t0: float, dt: float) -> list:
        out = []
        t, end = t0, t0 + dt
        while t < end - 1e-12:
            try:
                b = self.demand.bin_at(t)
            except BinNotCovered:
                if not self._warned_horizon:
                    log.warning("no demand defined at t=%s; issuing no requests", t)
                    self._warned_horizon = True
                break
            stop = min(end, b.end)
            out += sample_arrivals(self.demand, t, stop - t, self.demand_rng)
            t = stop
        return out

    def _issue(self, q: TripQuery) -> None:
        willing = bool(self.share_rng.random() < self.config.share_willingness)
        if self.config.policy is Policy.NOSHARE:
            willing = False
        r = Request(len(self.requests), q.origin, q.dest, q.time, willing, q.time + self.config.t_match)
        self.requests[r.id] = r
        self.waiting.append(r)
        self.metrics.issued += 1
        self.log.emit(q.time, "request", request=r.id, node=r.origin, detail=_fmt(dest=r.dest, willing=willing))

    def _expire(self, now: float) -> None:
        keep = []
        for r in self.waiting:
            if r.status is Status.WAITING and now >= r.deadline:
                r.status = Status.CANCELLED
                self.metrics.cancelled += 1
                self.log.emit(r.deadline, "cancel", request=r.id, node=r.origin)
            elif r.status is Status.WAITING:
                keep.append(r)
        self.waiting = keep

    # -- matching ----------------------------------------------------------

    def distance_to(self, v: Vehicle, node: int) -> float:
        """Network distance from the vehicle's current position to ``node``."""
        d = self.dm.dist
        if v.offset > 0:
            rest = self.net.arc_length(v.node, v.route[0]) - v.offset
            return rest + float(d[v.route[0], node])
        return float(d[v.node, node])

    def match_requests(self) -> list:
        """Assign waiting requests oldest first; returns ``(request, vehicle, kind)``."""
        cfg = self.config
        assigned = []
        idle = [v for v in self.vehicles if v.state is State.IDLE]
        reach = cfg.t_wait * self.speed
        for r in sorted(self.waiting, key=lambda r: (r.issue_time, r.id)):
            if r.status is not Status.WAITING:
                continue
            if idle:
                nodes = np.fromiter((v.node for v in idle), dtype=np.int64, count=len(idle))
                dist = self.dm.dist[nodes, r.origin]
                k = int(np.argmin(dist))  # first minimum = lowest vehicle id
                if dist[k] <= reach:
                    v = idle.pop(k)
                    self._assign_first(v, r, float(dist[k]))
                    assigned.append((r.id, v.id, "first"))
                    continue
            if not r.willing:
                continue
            cands = []
            for v in self.vehicles:
                if v.state is not State.PARTIAL or not self.requests[v.passengers[0]].willing:
                    continue
                d = self.distance_to(v, r.origin)
                if d <= reach:
                    cands.append((d, v.id, v))
            for d, _, v in sorted(cands, key=lambda c: (c[0], c[1])):
                a = self.requests[v.passengers[0]]
                check = detour_feasible(a, r, self.dm, cfg.alpha, v.odometer - a.ride_start, d)
                if check.feasible:
                    self.on_second_match(v, r, check, d)
                    assigned.append((r.id, v.id, "second"))
                    break
        self.waiting = [r for r in self.waiting if r.status is Status.WAITING]
        return assigned

    def _assign_first(self, v: Vehicle, r: Request, dist: float) -> None:
        r.status = Status.MATCHED
        r.vehicle = v.id
        v.target = r.id
        self._set_state(v, State.TO_FIRST_PICKUP, self.time)
        v.route = self.dm.path(v.node, r.origin)[1:]
        self.log.emit(self.time, "match", v.id, r.id, v.node, _fmt(kind="first", distance_m=dist, eta_s=dist / self.speed))

    def on_second_match(self, v: Vehicle, r: Request, check: PoolCheck, dist: float) -> None:
        """Suspend the committed route and fetch the second passenger."""
        r.status = Status.MATCHED
        r.vehicle = v.id
        v.target = r.id
        a = v.passengers[0]
        v.drop_order = [r.id, a] if check.drop_b_first else [a, r.id]
        v.committed = ()
        self._set_state(v, State.TO_SECOND_PICKUP, self.time)
        start = v.position
        head = [v.route[0]] if v.offset > 0 else []
        v.route = head + self.dm.path(start, r.origin)[1:]
        self.log.emit(
            self.time, "match", v.id, r.id, start,
            _fmt(kind="second", distance_m=dist, eta_s=dist / self.speed,
                 drop_first="B" if check.drop_b_first else "A",
                 a_ride_m=check.a_ride_m, b_ride_m=check.b_ride_m),
        )

    # -- movement ----------------------------------------------------------

    def _advance(self, v: Vehicle, t0: float, t1: float) -> None:
        now = t0
        speed = self.speed
        guard = 0
        while now < t1:
            if not v.route:
                now = self._arrive(v, now)
                if v.state is State.IDLE or now >= t1:
                    return
                guard += 1
                if guard > 8 and not v.route:
                    raise AssertionError(f"vehicle {v.id} stuck at node {v.node} in {v.state}")
                continue
            nxt = v.route[0]
            remain = self.net.arc_length(v.node, nxt) - v.offset
            reach = speed * (t1 - now)
            if reach < remain:
                v.offset += reach
                self._odo(v, reach)
                return
            self._odo(v, remain)
            now += remain / speed
            v.node = nxt
            v.offset = 0.0
            v.route.pop(0)
        if not v.route and v.state is not State.IDLE:
            # arrived exactly at the tick boundary
            self._arrive(v, t1)

    def _odo(self, v: Vehicle, meters: float) -> None:
        v.odometer += meters
        v.segment_m += meters

    def _arrive(self, v: Vehicle, now: float) -> float:
        """Handle reaching the end of the current leg; returns the time after
        any wait for a passenger who has not issued yet."""
        s = v.state
        if s is State.TO_FIRST_PICKUP:
            r = self.requests[v.target]
            now = max(now, r.issue_time)
            self._pickup(v, r, now)
            self.on_first_pickup(v, r, now)
        elif s is State.TO_SECOND_PICKUP:
            r = self.requests[v.target]
            now = max(now, r.issue_time)
            self._pickup(v, r, now)
            for rid in v.passengers:
                self.requests[rid].shared = True
            self._set_state(v, State.DUAL, now)
            v.route = self.dm.path(v.node, self.requests[v.drop_order[0]].dest)[1:]
        elif s is State.PARTIAL:
            self._dropoff(v, self.requests[v.passengers[0]], now)
            v.committed = ()
            self._set_state(v, State.IDLE, now)
        elif s is State.DUAL:
            self._dropoff(v, self.requests[v.drop_order.pop(0)], now)
            self._set_state(v, State.DROPPING_LAST, now)
            v.route = self.dm.path(v.node, self.requests[v.drop_order[0]].dest)[1:]
        elif s is State.DROPPING_LAST:
            self._dropoff(v, self.requests[v.drop_order.pop(0)], now)
            self._set_state(v, State.IDLE, now)
        return now

    def _pickup(self, v: Vehicle, r: Request, now: float) -> None:
        assert v.node == r.origin, "pickup away from the request origin"
        r.status = Status.PICKED_UP
        r.pickup_time = now
        r.ride_start = v.odometer
        v.passengers.append(r.id)
        v.target = None
        self.log.emit(now, "pickup", v.id, r.id, v.node, _fmt(wait_s=now - r.issue_time))

    def _dropoff(self, v: Vehicle, r: Request, now: float) -> None:
        assert v.node == r.dest, "drop-off away from the request destination"
        r.status = Status.COMPLETED
        v.passengers.remove(r.id)
        ride = v.odometer - r.ride_start
        direct = float(self.dm.dist[r.origin, r.dest])
        if r.shared:
            assert ride <= self.config.alpha * direct + LEN_TOL, f"request {r.id} detour bound violated"
        self.metrics.completed += 1
        self.metrics.total_wait_s += r.pickup_time - r.issue_time
        self.metrics.shared_orders += r.shared
        self.log.emit(now, "dropoff", v.id, r.id, v.node, _fmt(ride_m=ride, direct_m=direct, shared=r.shared))

    def on_first_pickup(self, v: Vehicle, r: Request, now: float) -> None:
        """Commit the route to the first passenger's destination."""
        cfg = self.config
        shortest = float(self.dm.dist[r.origin, r.dest])
        if cfg.policy is Policy.PROPOSED:
            field_ = self.probability_field(r.origin, r.dest, exclude=v.id)
            inst = PlanInstance.build(
                r.origin, r.dest, cfg.alpha,
                {(i, j): self.net.arc_length(i, j) for i, j in zip(field_.src.tolist(), field_.dst.tolist())},
                field_.prizes(), shortest=shortest,
            )
            try:
                path = plan_route(inst, cfg.solver)
            except Unreachable as exc:
                raise AssertionError(f"matched request {r.id} cannot be routed: {exc}") from None
            if len(self.fields) < cfg.field_snapshots:
                self.fields.append((v.id, r.id, field_, path, inst))
            nodes, length = list(path.nodes), path.length
            linear, exact, certified, labels = path.linear, path.exact, path.certified, path.labels
        else:
            nodes = self.dm.path(r.origin, r.dest)
            length = self.net.path_length(nodes)
            linear = exact = 0.0
            certified, labels = True, 0
        assert length <= cfg.alpha * shortest + LEN_TOL
        v.committed = tuple(nodes)
        v.route = nodes[1:]
        self._set_state(v, State.PARTIAL, now)
        self.plans.append((v.id, r.id, tuple(nodes), length, shortest))
        self.metrics.plans += 1
        self.metrics.certified_plans += certified
        self.metrics.path_ratio_sum += length / shortest
        self.log.emit(
            now, "plan", v.id, r.id, r.origin,
            _fmt(policy=cfg.policy.value, length_m=length, shortest_m=shortest, linear=linear,
                 exact=exact, certified=certified, labels=labels),
        )

    # -- bookkeeping -------------------------------------------------------

    def _set_state(self, v: Vehicle, state: State, now: float) -> None:
        self._close_segment(v, now)
        v.state = state

    def _close_segment(self, v: Vehicle, now: float, reason: str = "") -> None:
        aboard = ABOARD[v.state]
        meters = v.segment_m
        if aboard == 2:
            self.metrics.shared_distance_m += meters
        elif v.state in (State.IDLE, State.TO_FIRST_PICKUP):
            self.metrics.empty_distance_m += meters
        detail = _fmt(state=v.state.value, meters=meters, aboard=aboard)
        if reason:
            detail += f";reason={reason}"
        self.log.emit(now, "segment", v.id, "", v.position, detail)
        v.segment_m = 0.0
