import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urbanflow.embedding import EmbeddingTable, Vocabulary
from urbanflow.errors import ZeroVector
from urbanflow.relatedness import (assign_weights, cosine, read_arc_weights, similarity_distance_profile,
                                   write_arc_weights, write_profile)

from conftest import graph_from_edges


def table_for(vectors: dict):
    ids = sorted(vectors)
    return EmbeddingTable(Vocabulary(ids, [1] * len(ids)), np.array([vectors[i] for i in ids], dtype=float))


def test_cosine_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert cosine(v, v) == pytest.approx(1.0)
    assert cosine((1, 0), (0, 1)) == 0.0
    assert cosine((1, 0), (1, 1)) == pytest.approx(0.70710678, abs=1e-8)
    with pytest.raises(ZeroVector):
        cosine((0, 0), (1, 1))
    with pytest.raises(ValueError):
        cosine((1, 0), (1, 0, 0))


def test_identical_vectors_weight_one():
    g = graph_from_edges([(1, 2, 10)])
    report = assign_weights(g, table_for({1: [1, 2], 2: [1, 2]}))
    assert g.arc_weights() == pytest.approx([1.0, 1.0], abs=1e-15)
    assert report.weighted == 2 and report.defaulted == 0


def test_missing_endpoint_gets_floor():
    g = graph_from_edges([(1, 2, 10), (2, 3, 10)])
    report = assign_weights(g, table_for({1: [1, 0], 2: [1, 1]}), floor=1e-6)
    weights = {(a.src, a.dst): a.weight for a in g.arcs}
    assert weights[(2, 3)] == weights[(3, 2)] == 1e-6
    assert report.defaulted == 2
    assert report.weighted + report.defaulted == len(g.arcs)


def test_mean_weight_hand_sum():
    # arcs 1->2 (cos 0.6), 2->3 (cos 0), 3->1 (cos -0.8 -> floor)
    g = graph_from_edges([(1, 2, 10), (2, 3, 10), (3, 1, 10)], oneway=True)
    report = assign_weights(g, table_for({1: [1, 0], 2: [0.6, 0.8], 3: [-0.8, 0.6]}), floor=1e-6)
    assert g.arc_weights() == pytest.approx([0.6, 1e-6, 1e-6])
    assert report.mean_weight == pytest.approx((0.6 + 1e-6 + 1e-6) / 3)


def test_floor_validation():
    g = graph_from_edges([(1, 2, 10)])
    with pytest.raises(ValueError):
        assign_weights(g, table_for({1: [1], 2: [1]}), floor=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_weights_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    n = 8
    edges = [(i, j, 10.0) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4] or [(0, 1, 10.0)]
    g = graph_from_edges(edges)
    vecs = {i: rng.normal(size=5) for i in range(n) if rng.random() < 0.9}
    assign_weights(g, table_for(vecs) if vecs else table_for({99: [1.0] * 5}))
    w = {(a.src, a.dst): a.weight for a in g.arcs}
    for (u, v), x in w.items():
        assert 1e-6 <= x <= 1.0
        assert x == w[(v, u)]


def test_weights_file_round_trip(tmp_path):
    g = graph_from_edges([(1, 2, 10), (2, 3, 10)])
    for k, a in enumerate(g.arcs):
        a.weight = 0.1 * (k + 1)
    write_arc_weights(g, tmp_path / "w.csv")
    h = graph_from_edges([(1, 2, 10), (2, 3, 10)])
    read_arc_weights(h, tmp_path / "w.csv")
    assert h.arc_weights().tolist() == g.arc_weights().tolist()


def test_profile_identical_vectors():
    g = graph_from_edges([(i, i + 1, 100) for i in range(6)])
    table = table_for({i: [1.0, 2.0] for i in range(7)})
    bins, unreachable = similarity_distance_profile(g, table, 1.0, 100.0, seed=0)
    assert unreachable == 0
    assert all(b.mean_similarity == pytest.approx(1.0) for b in bins)
    assert sum(b.pair_count for b in bins) == 7 * 6


def test_profile_single_pair_bin_convention(tmp_path):
    g = graph_from_edges([(1, 2, 100)])
    bins, _ = similarity_distance_profile(g, table_for({1: [1, 0], 2: [1, 1]}), 1.0, 50.0, seed=0)
    assert [(b.bin_center_m, b.pair_count) for b in bins] == [(125.0, 2)]
    write_profile(bins, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "bin_center_m,mean_similarity,pair_count"


def test_profile_unreachable_and_determinism():
    g = graph_from_edges([(1, 2, 100), (3, 4, 100)])
    rng = np.random.default_rng(0)
    table = table_for({i: rng.normal(size=3) for i in range(1, 5)})
    a = similarity_distance_profile(g, table, 1.0, 100.0, seed=3)
    b = similarity_distance_profile(g, table, 1.0, 100.0, seed=3)
    assert a == b
    assert a[1] == 8
