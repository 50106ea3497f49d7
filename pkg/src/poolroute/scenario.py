"""Scenario files, single runs and multi-seed sweeps."""
from __future__ import annotations

import copy
import csv
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .demand import DemandTable, directional_demand, read_demand_csv
from .errors import ConfigError, PoolRouteError
from .network import DistanceMatrix, MfdCurve, RoadNetwork, all_pairs_shortest, grid_network, read_network_csv
from .planner import SolverConfig
from .simulator import EventLog, Policy, Simulation, SimulationConfig

DEFAULT_SCENARIO = """\
# Scenario file.  Lengths in meters, times in seconds, rates per hour.
network:
  # either a CSV file with columns from,to,length_m (path relative to this file)
  file: null
  # or a generated grid with bidirectional arcs
  grid:
    rows: 10
    cols: 10
    edge_length_m: 200.0

demand:
  # either a CSV file with columns bin_start_s,bin_end_s,origin,dest,rate_per_hour
  file: null
  # or a synthetic field: uniform background plus one-way corridor flows
  generator:
    hourly_totals: [400, 800, 400]   # one bin per entry
    bin_length_s: 3600.0
    corridor_rows: [2, 7]            # grid rows, flowing towards higher column
    corridor_cols: [3]               # grid columns, flowing towards higher row
    corridors: []                    # explicit node sequences (any network)
    corridor_share: 0.6              # fraction of each bin's rate on corridors
    min_trip_m: 600.0

simulation:
  alpha: 1.2                 # detour allowance, route length <= alpha * shortest
  zeta: 1.0
  eta: 0.001
  t_wait: 300.0              # max pickup ETA for a match
  t_match: 60.0              # time a request stays in the matching pool
  fleet_size: 100
  dt: 1.0
  duration: 10800.0
  seed: 0
  policy: proposed           # proposed | shortest | noshare
  share_willingness: 1.0     # probability a request accepts pooling
  rate_unit_s: 1.0           # time unit of the rates in the node match probability
  background_accumulation: 0.0
  field_snapshots: 0         # probability fields written for the first N plans

mfd:
  v_free: 8.33               # m/s
  n_jam: 2000.0              # vehicles
  min_speed_fraction: 0.05

solver:
  max_labels: 2000000
  time_limit: null           # seconds per plan; null = no limit
"""


@dataclass
class Scenario:
    network: dict
    demand: dict
    simulation: SimulationConfig
    base_dir: Path = field(default_factory=Path.cwd)


def _defaults() -> dict:
    return yaml.safe_load(DEFAULT_SCENARIO)


def _key_lines(text: str) -> dict:
    """Map dotted key paths to their 1-based line numbers."""
    out = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                out[path] = k.start_mark.line + 1
                walk(v, path + ".")

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return out


def _merge(base: dict, override: dict, lines: dict, prefix="") -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        path = f"{prefix}{k}"
        if k not in base:
            where = f"line {lines[path]}: " if path in lines else ""
            raise ConfigError(f"{where}unknown key {path!r}")
        if isinstance(base[k], dict) and k not in ("grid", "generator"):
            if not isinstance(v, dict):
                raise ConfigError(f"line {lines.get(path, '?')}: {path!r} must be a mapping")
            out[k] = _merge(base[k], v, lines, path + ".")
        elif isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, lines, path + ".")
        else:
            out[k] = v
    return out


def scenario_from_dict(data: dict, base_dir=None, lines=None) -> Scenario:
    lines = lines or {}
    merged = _merge(_defaults(), data or {}, lines)
    sim, mfd, solver = merged["simulation"], merged["mfd"], merged["solver"]
    try:
        cfg = SimulationConfig(
            **sim,
            mfd=MfdCurve(**mfd),
            solver=SolverConfig(**solver),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulation settings: {exc}") from None
    return Scenario(merged["network"], merged["demand"], cfg, Path(base_dir or Path.cwd()))


def load_scenario(path) -> Scenario:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return scenario_from_dict(data, path.parent, _key_lines(text))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def default_scenario(**sim_overrides) -> Scenario:
    scn = scenario_from_dict({})
    scn.simulation = replace(scn.simulation, **sim_overrides)
    return scn


def build_network(scn: Scenario) -> RoadNetwork:
    section = scn.network
    if section.get("file"):
        return read_network_csv(scn.base_dir / section["file"])
    g = section["grid"]
    return grid_network(int(g["rows"]), int(g["cols"]), float(g["edge_length_m"]))


def grid_corridors(rows: int, cols: int, corridor_rows=(), corridor_cols=()) -> list:
    out = [[r * cols + c for c in range(cols)] for r in corridor_rows]
    out += [[r * cols + c for r in range(rows)] for c in corridor_cols]
    return out


def build_demand(scn: Scenario, dm: DistanceMatrix) -> DemandTable:
    section = scn.demand
    if section.get("file"):
        return read_demand_csv(scn.base_dir / section["file"])
    g = section["generator"]
    corridors = [list(c) for c in g.get("corridors") or []]
    if g.get("corridor_rows") or g.get("corridor_cols"):
        if scn.network.get("file"):
            raise ConfigError("corridor_rows/corridor_cols need a generated grid network")
        grid = scn.network["grid"]
        corridors += grid_corridors(grid["rows"], grid["cols"], g.get("corridor_rows") or (), g.get("corridor_cols") or ())
    return directional_demand(
        dm,
        hourly_totals=g["hourly_totals"],
        corridors=corridors,
        corridor_share=float(g["corridor_share"]),
        bin_length=float(g["bin_length_s"]),
        min_trip_m=float(g["min_trip_m"]),
    )


def build_world(scn: Scenario):
    net = build_network(scn)
    dm = all_pairs_shortest(net)
    return net, dm, build_demand(scn, dm)


def run_scenario(scn: Scenario, out_dir=None, world=None):
    """Run one simulation; writes summaries, the event log and any
    probability-field snapshots into ``out_dir``.  Returns
    ``(metrics, artifacts)``."""
    net, dm, demand = world if world is not None else build_world(scn)
    artifacts = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        artifacts["events"] = out / "events.csv"
    events = EventLog(artifacts.get("events"))
    try:
        sim = Simulation(net, dm, demand, scn.simulation, events)
        metrics = sim.run()
    finally:
        events.close()
    if out is not None:
        artifacts["metrics_json"] = out / "metrics.json"
        artifacts["metrics_txt"] = out / "metrics.txt"
        artifacts["metrics_json"].write_text(metrics.to_json(), encoding="utf-8")
        artifacts["metrics_txt"].write_text(metrics.to_table(), encoding="utf-8")
        for k, (vid, rid, fld, path, inst) in enumerate(sim.fields):
            fpath = out / f"field_{k:03d}_v{vid}_r{rid}.csv"
            fld.write_csv(fpath)
            inst.dump(out / f"instance_{k:03d}_v{vid}_r{rid}.json")
            artifacts.setdefault("fields", []).append(fpath)
    return metrics, artifacts


SWEEP_COLUMNS = (
    "answer_rate",
    "avg_wait_s",
    "shared_orders",
    "shared_distance_km",
    "empty_distance_km",
    "certified_plan_fraction",
    "mean_path_ratio",
)


def parse_variant(token: str):
    """``policy[+pct]`` -> (label, policy, fleet factor); e.g. ``noshare+20``."""
    name, _, pct = token.partition("+")
    try:
        policy = Policy(name.strip().lower())
    except ValueError:
        raise ConfigError(f"unknown policy in variant {token!r}") from None
    factor = 1.0 + float(pct) / 100.0 if pct else 1.0
    return token, policy, factor


def _run_one(args):
    scn, world = args
    try:
        return run_scenario(scn, world=world)[0].summary()
    except PoolRouteError as exc:
        return {"error": str(exc)}


def sweep(variants, seeds, base: Scenario, workers: int = 1):
    """Run every ``(label, policy, fleet factor)`` variant for every seed.

    Returns ``(table, runs)``: one aggregated row per variant with mean and
    standard deviation of each metric, and the per-run summaries.  A failing
    run is recorded and excluded from the aggregate.
    """
    world = build_world(base)
    jobs = []
    for label, policy, factor in variants:
        for seed in seeds:
            cfg = replace(
                base.simulation,
                policy=policy,
                seed=int(seed),
                fleet_size=int(round(base.simulation.fleet_size * factor)),
            )
            jobs.append((label, seed, Scenario(base.network, base.demand, cfg, base.base_dir)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, [(scn, world) for _, _, scn in jobs]))
    else:
        results = [_run_one((scn, world)) for _, _, scn in jobs]

    runs = [{"variant": label, "seed": seed, **res} for (label, seed, _), res in zip(jobs, results)]
    table = []
    for label, _, _ in variants:
        ok = [r for r in runs if r["variant"] == label and "error" not in r]
        row = {"variant": label, "runs": len(ok), "failed": sum(r["variant"] == label for r in runs) - len(ok)}
        for col in SWEEP_COLUMNS:
            vals = [float(r[col]) for r in ok]
            row[f"{col}_mean"] = statistics.fmean(vals) if vals else float("nan")
            row[f"{col}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        table.append(row)
    return table, runs


def format_table(table) -> str:
    head = f"{'variant':<16}{'answer %':>16}{'wait s':>16}{'shared orders':>18}{'shared km':>18}{'empty km':>18}"
    lines = [head]
    for r in table:
        lines.append(
            f"{r['variant']:<16}"
            f"{100 * r['answer_rate_mean']:>9.1f} ±{100 * r['answer_rate_std']:>4.1f}"
            f"{r['avg_wait_s_mean']:>9.1f} ±{r['avg_wait_s_std']:>4.1f}"
            f"{r['shared_orders_mean']:>11.1f} ±{r['shared_orders_std']:>4.1f}"
            f"{r['shared_distance_km_mean']:>11.1f} ±{r['shared_distance_km_std']:>4.1f}"
            f"{r['empty_distance_km_mean']:>11.1f} ±{r['empty_distance_km_std']:>4.1f}"
        )
    return "\n".join(lines) + "\n"


def write_sweep(table, runs, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table_csv": out / "comparison.csv", "table_txt": out / "comparison.txt", "runs": out / "runs.json"}
    with open(paths["table_csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    paths["table_txt"].write_text(format_table(table), encoding="utf-8")
    paths["runs"].write_text(json.dumps(runs, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return paths
