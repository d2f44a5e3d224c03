import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urbanflow.errors import Discarded
from urbanflow.geo import LocalProjection
from urbanflow.road_graph import Arc, RoadGraph, RoadNode
from urbanflow.synth import SynthConfig, generate
from urbanflow.trajectory import (GpsRecord, NodeSnapper, Trip, build_corpus, extract_trips, read_corpus,
                                  read_gps_csv, snap_trip, write_corpus, write_gps_csv)

from conftest import graph_from_edges


def recs(statuses, vid="v", dt=30.0, lon=114.0, lat=30.0):
    return [GpsRecord(vid, i * dt, lon, lat, bool(s)) for i, s in enumerate(statuses)]


def at_node(g, nodes, vid="v"):
    return Trip(vid, [GpsRecord(vid, float(i), g.nodes[n].lon, g.nodes[n].lat, True) for i, n in enumerate(nodes)])


def test_single_trip_run():
    trips = extract_trips(recs([0, 1, 1, 1, 0]))
    assert [len(t.records) for t in trips] == [3]


def test_two_runs():
    trips = extract_trips(recs([1, 1, 0, 1, 1]))
    assert [len(t.records) for t in trips] == [2, 2]


def test_lone_occupied_record():
    assert extract_trips(recs([0, 1, 0])) == []


def test_gap_splits_run():
    records = recs([1, 1, 1, 1])
    records[2:] = [GpsRecord("v", r.timestamp + 1000, r.lon, r.lat, True) for r in records[2:]]
    assert [len(t.records) for t in extract_trips(records, max_gap_s=300)] == [2, 2]


def test_vehicles_and_order_independent():
    a = recs([1, 1, 1], vid="a")
    b = recs([1, 1], vid="b")
    mixed = [b[1], a[2], a[0], b[0], a[1]]
    trips = extract_trips(mixed)
    assert [(t.vehicle_id, len(t.records)) for t in trips] == [("a", 3), ("b", 2)]
    assert [r.timestamp for r in trips[0].records] == [0.0, 30.0, 60.0]


def test_snap_exact_node(line4):
    ids, _ = NodeSnapper(line4).nearest([line4.nodes[3].lon], [line4.nodes[3].lat], 100.0)
    assert ids.tolist() == [3]


def test_snap_collapses_duplicates(line4):
    assert snap_trip(line4, at_node(line4, [1, 1, 2])) == [1, 2]


def test_snap_fills_gap(line4):
    assert snap_trip(line4, at_node(line4, [1, 4])) == [1, 2, 3, 4]


def test_snap_discard_reasons(line4):
    far = Trip("v", [GpsRecord("v", 0, 120.0, 10.0, True), GpsRecord("v", 1, 120.0, 10.0, True)])
    with pytest.raises(Discarded) as exc:
        snap_trip(line4, far)
    assert exc.value.reason == Discarded.NO_NODES_IN_RANGE
    with pytest.raises(Discarded) as exc:
        snap_trip(line4, at_node(line4, [2, 2, 2]))
    assert exc.value.reason == Discarded.TOO_SHORT
    oneway = graph_from_edges([(1, 2, 100)], oneway=True)
    with pytest.raises(Discarded) as exc:
        snap_trip(oneway, at_node(oneway, [2, 1]))
    assert exc.value.reason == Discarded.UNREACHABLE_GAP


def test_snap_tie_goes_to_lowest_id():
    g = RoadGraph([RoadNode(5, 114.001, 30.0), RoadNode(2, 113.999, 30.0)])
    ids, _ = NodeSnapper(g).nearest([114.0], [30.0], 500.0)
    assert ids.tolist() == [2]


def test_empty_corpus(line4):
    corpus, stats = build_corpus(line4, [])
    assert len(corpus) == 0
    assert stats.kept == 0 and stats.trips_in == 0 and sum(stats.discarded.values()) == 0


def test_corpus_accounting(line4):
    good = [at_node(line4, [1, 3]) for _ in range(7)]
    short = [at_node(line4, [2, 2]) for _ in range(3)]
    corpus, stats = build_corpus(line4, good[:4] + short + good[4:])
    assert len(corpus) == 7 and stats.kept == 7
    assert stats.discarded[Discarded.TOO_SHORT] == 3
    corpus.validate(line4)


def test_gps_csv_round_trip(tmp_path):
    records = recs([0, 1, 1, 0], vid="taxi 7")
    write_gps_csv(records, tmp_path / "t.csv")
    with open(tmp_path / "t.csv", "a") as fh:
        fh.write("x,notatime,1,2,1\n")
    back, bad = read_gps_csv(tmp_path / "t.csv")
    assert back == records and bad == 1


def test_corpus_round_trip_and_determinism(tmp_path, line4):
    trips = [at_node(line4, [1, 4]), at_node(line4, [4, 2])]
    write_corpus(build_corpus(line4, trips)[0], tmp_path / "a.txt")
    write_corpus(build_corpus(line4, trips)[0], tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert read_corpus(tmp_path / "a.txt").sentences == [[1, 2, 3, 4], [4, 3, 2]]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_snapper_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 400))
    proj = LocalProjection(114.3, 30.5)
    xy = rng.uniform(0, 3000, size=(n, 2))
    lon, lat = proj.inverse(xy[:, 0], xy[:, 1])
    g = RoadGraph([RoadNode(i, float(a), float(b)) for i, (a, b) in enumerate(zip(lon, lat))])
    snapper = NodeSnapper(g)
    q = rng.uniform(-100, 3100, size=(50, 2))
    qlon, qlat = proj.inverse(q[:, 0], q[:, 1])
    got, dist = snapper.nearest(qlon, qlat, 100.0)
    px, py = snapper.projection.forward(lon, lat)
    qx, qy = snapper.projection.forward(qlon, qlat)
    for k in range(len(q)):
        d = np.hypot(px - qx[k], py - qy[k])
        want = int(np.flatnonzero(d == d.min()).min()) if d.min() <= 100.0 else -1
        assert got[k] == want


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_adjacency_property(seed):
    rng = np.random.default_rng(seed)
    n = 12
    g = RoadGraph([RoadNode(i, 114.0 + 0.002 * (i % 4), 30.0 + 0.002 * (i // 4)) for i in range(n)])
    k = 0
    for i in range(n):
        for j in range(n):
            if i != j and rng.random() < 0.25:
                g.add_arc(Arc(i, j, k, 200.0))
                k += 1
    trips = [at_node(g, rng.integers(0, n, size=int(rng.integers(2, 6))).tolist()) for _ in range(20)]
    corpus, stats = build_corpus(g, trips)
    assert stats.kept + sum(stats.discarded.values()) == stats.trips_in == 20
    for sent in corpus:
        for a, b in zip(sent, sent[1:]):
            assert g.has_arc(a, b)


def test_synthetic_fixes_snap_back():
    city = generate(SynthConfig(trips_per_day=300, days=1, seed=4))
    occupied = [r for r in city.records if r.occupied]
    ids, _ = NodeSnapper(city.graph).nearest([r.lon for r in occupied], [r.lat for r in occupied], 100.0)
    accuracy = float(np.mean(ids == np.array(city.record_nodes)))
    assert accuracy >= 0.99
