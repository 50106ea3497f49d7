"""Ride-pooling simulation with exact en-route planning for partially
occupied vehicles."""
from .demand import DemandTable, TripQuery, attractiveness, pooled_distance
from .errors import PoolRouteError
from .match_model import (
    EdgeProbabilityField,
    FleetSnapshot,
    ModelParams,
    build_probability_field,
    effective_supply,
)
from .metrics import Metrics, compute_metrics
from .network import DistanceMatrix, RoadNetwork, all_pairs_shortest, grid_network, load_network
from .planner import PlanInstance, PlannedPath, SolverConfig, enumerate_optimal, plan_route
from .scenario import load_scenario, run_scenario, sweep
from .simulator import Policy, Simulation, SimulationConfig

__version__ = "0.1.0"
