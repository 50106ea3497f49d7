"""Command line entry point: ``poolroute <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import scenario as sc
from .demand import directional_demand, write_demand_csv
from .errors import PoolRouteError
from .network import all_pairs_shortest, grid_network, read_network_csv, write_network_csv
from .planner import PlanInstance, SolverConfig, exact_objective, linearized_objective, plan_route
from .simulator import Policy, Simulation

log = logging.getLogger("poolroute")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    # Accepted before or after the subcommand; the subparser copy must not
    # clobber a value given up front.
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=d, help="scenario YAML file")
    p.add_argument("--seed", type=int, default=d, help="random seed (overrides the config)")
    p.add_argument("--out", type=Path, default=d, help="output directory")
    p.add_argument("--policy", choices=[x.value for x in Policy], default=d, help="routing policy")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def _int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _scenario(args) -> sc.Scenario:
    scn = sc.load_scenario(args.config) if args.config else sc.default_scenario()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.policy is not None:
        overrides["policy"] = Policy(args.policy)
    if overrides:
        scn.simulation = replace(scn.simulation, **overrides)
    return scn


def _out(args, default="out") -> Path:
    out = args.out if args.out is not None else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_network(args) -> int:
    net = grid_network(args.rows, args.cols, args.edge_length)
    path = _out(args) / args.name
    write_network_csv(net, path)
    print(f"wrote {net.n_nodes} nodes, {net.n_arcs} arcs to {path}")
    return 0


def cmd_gen_demand(args) -> int:
    if args.network:
        net = read_network_csv(args.network)
        corridors = []
        if args.corridor_rows or args.corridor_cols:
            raise PoolRouteError("--corridor-rows/--corridor-cols need a generated grid (omit --network)")
    else:
        net = grid_network(args.rows, args.cols, args.edge_length)
        corridors = sc.grid_corridors(args.rows, args.cols, args.corridor_rows, args.corridor_cols)
    for seq in args.corridor or []:
        corridors.append(_int_list(seq))
    table = directional_demand(
        all_pairs_shortest(net),
        hourly_totals=args.hourly,
        corridors=corridors,
        corridor_share=args.corridor_share,
        bin_length=args.bin_length,
        min_trip_m=args.min_trip_m,
    )
    path = _out(args) / args.name
    write_demand_csv(table, path)
    n = sum(len(b.rates) for b in table.bins)
    print(f"wrote {len(table.bins)} bins, {n} OD rates to {path}")
    return 0


def cmd_run(args) -> int:
    scn = _scenario(args)
    metrics, artifacts = sc.run_scenario(scn, _out(args))
    sys.stdout.write(metrics.to_table())
    for name, path in artifacts.items():
        if isinstance(path, list):
            print(f"{name}: {len(path)} files")
        else:
            print(f"{name}: {path}")
    return 0


def cmd_sweep(args) -> int:
    scn = _scenario(args)
    variants = [sc.parse_variant(t) for t in args.variants.split(",") if t.strip()]
    seeds = args.seeds_list if args.seeds_list else list(range(args.seeds))
    table, runs = sc.sweep(variants, seeds, scn, workers=args.workers)
    paths = sc.write_sweep(table, runs, _out(args))
    sys.stdout.write(sc.format_table(table))
    failed = [r for r in runs if "error" in r]
    for r in failed:
        print(f"run {r['variant']} seed {r['seed']} failed: {r['error']}", file=sys.stderr)
    print(f"comparison: {paths['table_txt']}")
    return 1 if failed else 0


def cmd_plan(args) -> int:
    inst = PlanInstance.load(args.instance)
    cfg = SolverConfig(max_labels=args.max_labels, time_limit=args.time_limit)
    path = plan_route(inst, cfg)
    out = {
        "path": list(path.nodes),
        "length_m": path.length,
        "budget_m": inst.budget,
        "exact_objective": exact_objective(path.nodes, inst),
        "linear_objective": linearized_objective(path.nodes, inst),
        "status": "certified" if path.certified else "best-effort",
        "labels": path.labels,
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_export_field(args) -> int:
    scn = _scenario(args)
    net, dm, demand = sc.build_world(scn)
    sim = Simulation(net, dm, demand, scn.simulation)
    while sim.time + 1e-9 < args.time:
        sim.tick()
    fld = sim.probability_field(args.origin, args.dest)
    path = _out(args) / f"field_{args.origin}_{args.dest}_t{int(sim.time)}.csv"
    fld.write_csv(path)
    print(f"wrote {len(fld)} arcs at t={sim.time:.1f}s to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poolroute", description="Ride-pooling simulation and en-route planning.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        s = sub.add_parser(name, help=help)
        _global_flags(s, suppress=True)
        s.set_defaults(func=fn)
        return s

    s = add("gen-network", cmd_gen_network, "write a grid network CSV")
    s.add_argument("--rows", type=int, default=10)
    s.add_argument("--cols", type=int, default=10)
    s.add_argument("--edge-length", type=float, default=200.0, help="meters")
    s.add_argument("--name", default="network.csv")

    s = add("gen-demand", cmd_gen_demand, "write a directional demand CSV")
    s.add_argument("--network", type=Path, help="network CSV; default is a generated grid")
    s.add_argument("--rows", type=int, default=10)
    s.add_argument("--cols", type=int, default=10)
    s.add_argument("--edge-length", type=float, default=200.0)
    s.add_argument("--hourly", type=_float_list, default=[400.0, 800.0, 400.0], help="requests per hour per bin")
    s.add_argument("--bin-length", type=float, default=3600.0)
    s.add_argument("--corridor-rows", type=_int_list, default=[], help="e.g. 2,7")
    s.add_argument("--corridor-cols", type=_int_list, default=[])
    s.add_argument("--corridor", action="append", help="explicit node sequence, e.g. 0,1,2,12")
    s.add_argument("--corridor-share", type=float, default=0.6)
    s.add_argument("--min-trip-m", type=float, default=600.0)
    s.add_argument("--name", default="demand.csv")

    add("run", cmd_run, "run one simulation and write its artifacts")

    s = add("sweep", cmd_sweep, "compare policies over several seeds")
    s.add_argument("--variants", default="proposed,shortest,noshare,noshare+20",
                   help="comma-separated policy[+fleet percent] tokens")
    s.add_argument("--seeds", type=int, default=10, help="use seeds 0..N-1")
    s.add_argument("--seeds-list", type=_int_list, default=None, help="explicit seeds, e.g. 3,5,8")
    s.add_argument("--workers", type=int, default=1)

    s = add("plan", cmd_plan, "solve one dumped planning instance")
    s.add_argument("instance", type=Path)
    s.add_argument("--max-labels", type=int, default=SolverConfig.max_labels)
    s.add_argument("--time-limit", type=float, default=None)

    s = add("export-field", cmd_export_field, "write the pickup-probability field for one trip")
    s.add_argument("--origin", type=int, required=True)
    s.add_argument("--dest", type=int, required=True)
    s.add_argument("--time", type=float, default=0.0, help="simulate up to this time first (s)")

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (PoolRouteError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
