import sys
import numpy as np
import pytest

from poolroute.network import all_pairs_shortest, grid_network, load_network


def random_graph(rng, n=30, p=0.12, integer=True, max_len=20):
    """Random directed graph with nodes 0..n-1; a Hamiltonian path keeps every
    id present."""
    records = {}
    order = rng.permutation(n)
    for a, b in zip(order, order[1:]):
        records[(int(a), int(b))] = None
    mask = rng.random((n, n)) < p
    for i, j in zip(*np.nonzero(mask)):
        if i != j:
            records[(int(i), int(j))] = None
    out = []
    for i, j in records:
        w = float(rng.integers(1, max_len + 1)) if integer else float(rng.uniform(0.5, max_len))
        out.append((i, j, w))
    return load_network(out)


@pytest.fixture(scope="session")
def grid3():
    net = grid_network(3, 3, 100.0)
    return net, all_pairs_shortest(net)


@pytest.fixture(scope="session")
def grid10():
    net = grid_network(10, 10, 200.0)
    return net, all_pairs_shortest(net)


def random_plan_instance(rng, alpha=None, max_prize=0.3, integer_lengths=None):
    """Random origin/destination on a 3x3 to 5x5 grid with random prizes."""
    from poolroute.planner import PlanInstance

    rows, cols = (int(x) for x in rng.integers(3, 6, 2))
    if integer_lengths is None:
        integer_lengths = bool(rng.random() < 0.5)
    arcs = {}
    for i, j, _ in grid_network(rows, cols, 1.0).arcs():
        arcs[(int(i), int(j))] = 100.0 if integer_lengths else float(rng.uniform(50.0, 150.0))
    prizes = {a: float(rng.uniform(0.0, max_prize)) for a in arcs}
    n = rows * cols
    O, D = (int(x) for x in rng.choice(n, 2, replace=False))
    if alpha is None:
        alpha = float(rng.choice([1.1, 1.2, 1.5]))
    return PlanInstance.build(O, D, alpha, arcs, prizes)


def check_planned_path(path, inst, tol=1e-6):
    nodes = path.nodes
    assert nodes[0] == inst.origin and nodes[-1] == inst.dest
    assert len(set(nodes)) == len(nodes), "path is not elementary"
    length = 0.0
    for a, b in zip(nodes, nodes[1:]):
        assert (a, b) in inst.arcs, f"({a},{b}) is not an arc"
        length += inst.arcs[(a, b)]
    assert abs(length - path.length) <= 1e-9 * max(1.0, length)
    assert length <= inst.budget + tol


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
