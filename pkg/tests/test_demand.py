import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poolroute.demand import (
    DemandTable,
    TripQuery,
    attractiveness,
    attractiveness_field,
    directional_demand,
    pooled_distance,
    read_demand_csv,
    sample_arrivals,
    write_demand_csv,
)
from poolroute.errors import BinNotCovered, MalformedRecord, Unreachable
from poolroute.network import all_pairs_shortest, load_network

from conftest import random_graph


def line(n):
    recs = []
    for k in range(n - 1):
        recs += [(k, k + 1, 1.0), (k + 1, k, 1.0)]
    return all_pairs_shortest(load_network(recs))


def table(entries, t1=3600.0):
    return DemandTable.from_records([(0.0, t1, i, j, r) for i, j, r in entries])


def test_pooled_distance_nested_trip():
    assert pooled_distance(0, 3, 1, 2, line(4)) == 3


def test_pooled_distance_identical_trip():
    dm = line(5)
    assert pooled_distance(1, 4, 1, 4, dm) == dm(1, 4)


def test_pooled_distance_unreachable():
    dm = all_pairs_shortest(load_network([(0, 1, 1), (1, 2, 1)]))
    with pytest.raises(Unreachable):
        pooled_distance(0, 2, 2, 0, dm)


def test_pooled_distance_brute_force():
    rng = np.random.default_rng(7)
    net = random_graph(rng, n=20, p=0.2)
    dm = all_pairs_shortest(net)
    d = dm.dist
    for _ in range(100):
        O, D, i, j = (int(x) for x in rng.integers(0, 20, 4))
        seqs = ([O, i, j, D], [O, i, D, j])
        expect = min(sum(d[a, b] for a, b in zip(s, s[1:])) for s in seqs)
        if np.isfinite(expect):
            assert pooled_distance(O, D, i, j, dm) == expect
        else:
            with pytest.raises(Unreachable):
                pooled_distance(O, D, i, j, dm)


def test_attractiveness_identical_trip():
    dm = line(4)
    q = TripQuery(0, 3, 10.0)
    assert attractiveness(q, 0, table([(0, 3, 6.0)]), dm) == 6.0


def test_attractiveness_hand_case():
    dm = line(3)
    q = TripQuery(0, 2, 0.0)
    tab = table([(1, 2, 4.0)])
    assert attractiveness(q, 1, tab, dm) == 3.0
    # independent evaluation of the same sum
    lp = min(dm(0, 1) + dm(1, 2) + dm(2, 2), dm(0, 1) + dm(1, 2) + dm(2, 2))
    assert 4.0 * (dm(0, 2) + dm(1, 2)) / (2 * lp) == 3.0


def test_attractiveness_no_demand():
    dm = line(3)
    tab = table([(0, 1, 0.0)])
    assert attractiveness(TripQuery(0, 2, 0.0), 1, tab, dm) == 0.0
    assert not attractiveness_field(TripQuery(0, 2, 0.0), tab, dm).any()


def test_field_matches_scalar():
    rng = np.random.default_rng(3)
    dm = all_pairs_shortest(random_graph(rng, n=15, p=0.3))
    entries = [(int(i), int(j), float(rng.uniform(0, 10))) for i, j in itertools.permutations(range(15), 2) if rng.random() < 0.3]
    tab = table(entries)
    q = TripQuery(0, 7, 100.0)
    field = attractiveness_field(q, tab, dm)
    for i in range(15):
        assert field[i] == pytest.approx(attractiveness(q, i, tab, dm), rel=1e-12, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pooling_ratio_at_most_one(seed):
    rng = np.random.default_rng(seed)
    dm = all_pairs_shortest(random_graph(rng, n=12, p=0.3, integer=False))
    d = dm.dist
    for _ in range(50):
        O, D, i, j = (int(x) for x in rng.integers(0, 12, 4))
        if O == D or i == j:
            continue
        try:
            lp = pooled_distance(O, D, i, j, dm)
        except Unreachable:
            continue
        ratio = (d[O, D] + d[i, j]) / (2 * lp)
        assert 0 < ratio <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 50.0))
def test_attractiveness_monotone_in_rates(seed, bump):
    rng = np.random.default_rng(seed)
    dm = line(6)
    entries = [(i, j, float(rng.uniform(0, 5))) for i, j in itertools.permutations(range(6), 2)]
    k = int(rng.integers(len(entries)))
    bumped = list(entries)
    bumped[k] = (entries[k][0], entries[k][1], entries[k][2] + bump)
    q = TripQuery(0, 5, 0.0)
    before = attractiveness_field(q, table(entries), dm)
    after = attractiveness_field(q, table(bumped), dm)
    assert (after >= before - 1e-12).all()


def test_opposite_direction_less_attractive():
    # directed ring 0 -> 1 -> ... -> 7 -> 0
    n = 8
    dm = all_pairs_shortest(load_network([(k, (k + 1) % n, 1.0) for k in range(n)]))
    q = TripQuery(0, 4, 0.0)
    along = table([(1, 3, 5.0)])
    against = table([(1, 7, 5.0)])
    assert attractiveness(q, 1, against, dm) < attractiveness(q, 1, along, dm)


def test_bins_and_lookup():
    tab = DemandTable.from_records([(0, 10, 0, 1, 1.0), (10, 20, 1, 0, 2.0)])
    assert tab.bin_at(10.0).start == 10  # left closed
    assert tab.rate(9.99, 0, 1) == 1.0 and tab.rate(15, 0, 1) == 0.0
    assert tab.horizon == (0, 20)
    with pytest.raises(BinNotCovered):
        tab.bin_at(20.0)


def test_table_validation():
    with pytest.raises(MalformedRecord, match="origin equals"):
        DemandTable.from_records([(0, 10, 1, 1, 1.0)])
    with pytest.raises(MalformedRecord, match="non-negative"):
        DemandTable.from_records([(0, 10, 0, 1, -1.0)])
    with pytest.raises(MalformedRecord, match="contiguous"):
        DemandTable.from_records([(0, 10, 0, 1, 1.0), (20, 30, 0, 1, 1.0)])


def test_csv_roundtrip_and_line_numbers(tmp_path):
    tab = DemandTable.from_records([(0, 3600, 0, 1, 2.5), (0, 3600, 1, 0, 1.0), (3600, 7200, 0, 1, 4.0)])
    path = tmp_path / "d.csv"
    write_demand_csv(tab, path)
    back = read_demand_csv(path)
    assert list(back.records()) == list(tab.records())
    path.write_text("bin_start_s,bin_end_s,origin,dest,rate_per_hour\n0,3600,0,1,1\n0,3600,2,2,1\n")
    with pytest.raises(MalformedRecord, match="line 3"):
        read_demand_csv(path)


def test_sampling_zero_table():
    tab = table([(0, 1, 0.0)])
    assert sample_arrivals(tab, 0.0, 1.0, np.random.default_rng(0)) == []


def test_sampling_poisson_mean():
    tab = DemandTable.from_records([(0, 20000, 0, 1, 3600.0)])
    rng = np.random.default_rng(11)
    n_ticks = 10_000
    total = sum(len(sample_arrivals(tab, float(t), 1.0, rng)) for t in range(n_ticks))
    assert abs(total / n_ticks - 1.0) <= 3 * np.sqrt(1.0 / n_ticks)


def test_sampling_stamps_and_determinism():
    tab = table([(0, 1, 900.0), (1, 2, 1800.0), (2, 0, 300.0)])
    a = sample_arrivals(tab, 100.0, 60.0, np.random.default_rng(5))
    b = sample_arrivals(tab, 100.0, 60.0, np.random.default_rng(5))
    assert a == b and a
    times = [q.time for q in a]
    assert times == sorted(times)
    assert all(100.0 <= t < 160.0 for t in times)


def test_sampling_straddling_bin():
    tab = DemandTable.from_records([(0, 10, 0, 1, 1.0), (10, 20, 0, 1, 1.0)])
    with pytest.raises(BinNotCovered):
        sample_arrivals(tab, 9.5, 1.0, np.random.default_rng(0))


def test_directional_demand_totals_and_direction(grid10):
    _, dm = grid10
    corridor = list(range(10))
    tab = directional_demand(dm, [400, 800], corridors=[corridor], corridor_share=0.5, min_trip_m=400)
    for b, total in zip(tab.bins, (400, 800)):
        assert b.rates.sum() == pytest.approx(total)
        assert tab.rate(b.start, 0, 9) > 0
        assert tab.rate(b.start, 9, 0) < tab.rate(b.start, 0, 9)
        assert all(dm(i, j) >= 400 for i, j in zip(b.origins, b.dests))
