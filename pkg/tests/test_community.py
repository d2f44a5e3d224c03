import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urbanflow.community import (DetectConfig, HierarchicalPartition, Partition, baseline_weights, codelength,
                                 compute_flow, detect_hierarchy, flow_from_arcs, intra_module_mean_weight,
                                 optimize_two_level, read_partition_csv, write_partition_csv)
from urbanflow.errors import NoConvergence

from conftest import (dense_flow_oracle, entropy_bits, graph_from_edges, map_equation_oracle, random_digraph,
                      set_partitions)


def cycle(n, weights=None):
    ids = np.arange(n)
    src = ids
    dst = (ids + 1) % n
    return ids, src, dst, np.ones(n) if weights is None else np.asarray(weights, dtype=float)


def two_triangles(bridge=0.01):
    edges = [(0, 1, 1, 1.0), (1, 2, 1, 1.0), (2, 0, 1, 1.0), (3, 4, 1, 1.0), (4, 5, 1, 1.0), (5, 3, 1, 1.0),
             (2, 3, 1, bridge)]
    return graph_from_edges(edges)


def test_flow_symmetric_cycles():
    f2 = flow_from_arcs(*cycle(2), tau=0.0)
    assert f2.node_flow == pytest.approx([0.5, 0.5], abs=1e-12)
    f3 = flow_from_arcs(*cycle(3), tau=0.0)
    assert f3.node_flow == pytest.approx([1 / 3] * 3, abs=1e-12)


def test_flow_matches_eigenvector_on_asymmetric_graph():
    ids = np.arange(4)
    src = np.array([0, 0, 1, 2, 2, 3, 3])
    dst = np.array([1, 2, 2, 0, 3, 0, 1])
    w = np.array([1.0, 3.0, 2.0, 0.5, 1.5, 4.0, 1.0])
    for tau in (0.0, 0.15):
        f = flow_from_arcs(ids, src, dst, w, tau=tau)
        assert np.abs(f.node_flow - dense_flow_oracle(4, src, dst, w, tau)).max() < 1e-8
        assert f.node_flow.sum() == pytest.approx(1.0, abs=1e-10)


def test_dangling_node_teleports():
    f = flow_from_arcs(np.arange(3), np.array([0, 1]), np.array([1, 2]), np.ones(2), tau=0.15)
    assert f.dangling == 1
    oracle = dense_flow_oracle(3, [0, 1], [1, 2], [1.0, 1.0], 0.15)
    assert np.abs(f.node_flow - oracle).max() < 1e-10


def test_no_convergence():
    with pytest.raises(NoConvergence):
        flow_from_arcs(*random_digraph(np.random.default_rng(0), 6), tau=0.15, max_iter=2)


def test_single_module_codelength_is_node_entropy():
    rng = np.random.default_rng(4)
    f = flow_from_arcs(*random_digraph(rng, 6, p=0.5), tau=0.15)
    assert codelength(f, np.zeros(6, dtype=int)) == pytest.approx(entropy_bits(f.node_flow), abs=1e-12)


def test_two_cycle_singletons_is_three_bits():
    f = flow_from_arcs(*cycle(2), tau=0.0)
    assert codelength(f, np.array([0, 1])) == pytest.approx(3.0, abs=1e-12)
    assert codelength(f, np.array([0, 0])) == pytest.approx(1.0, abs=1e-12)


def test_disconnected_cycles_prefer_split():
    ids = np.arange(6)
    src = np.array([0, 1, 2, 3, 4, 5])
    dst = np.array([1, 2, 0, 4, 5, 3])
    f = flow_from_arcs(ids, src, dst, np.ones(6), tau=0.0)
    assert codelength(f, np.array([0, 0, 0, 1, 1, 1])) < codelength(f, np.zeros(6, dtype=int))


def test_codelength_matches_textbook_form():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n = int(rng.integers(3, 8))
        ids, src, dst, w = random_digraph(rng, n)
        if len(src) == 0:
            continue
        tau = float(rng.choice([0.0, 0.15]))
        f = flow_from_arcs(ids, src, dst, w, tau=tau)
        labels = rng.integers(0, 3, size=n)
        want = map_equation_oracle(f.node_flow, src, dst, w, tau, labels)
        assert codelength(f, labels) == pytest.approx(want, abs=1e-10)


def exhaustive_minimum(flow):
    return min(codelength(flow, np.array(p)) for p in set_partitions(len(flow)))


def test_bridged_triangles_split_in_two():
    f = compute_flow(two_triangles(), tau=0.15)
    part = optimize_two_level(f)
    assert part.membership.tolist() == [0, 0, 0, 1, 1, 1]
    assert codelength(f, part) == pytest.approx(exhaustive_minimum(f), abs=1e-9)


def test_complete_graph_single_module():
    g = graph_from_edges([(i, j, 1) for i in range(4) for j in range(i + 1, 4)])
    f = compute_flow(g, tau=0.15)
    part = optimize_two_level(f)
    assert part.num_modules == 1
    assert codelength(f, part) == pytest.approx(exhaustive_minimum(f), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_never_worse_than_singletons_and_moves_monotone(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 25))
    ids, src, dst, w = random_digraph(rng, n, p=float(rng.uniform(0.1, 0.4)))
    if len(src) == 0:
        return
    f = flow_from_arcs(ids, src, dst, w, tau=0.15)
    log = []
    part = optimize_two_level(f, seed=seed, trials=2, move_log=log)
    assert codelength(f, part) <= codelength(f, np.arange(n)) + 1e-12
    assert set(part.membership.tolist()) == set(range(part.num_modules))
    assert all(after < before - 1e-10 for before, after in log)


def test_first_moves_lower_the_true_codelength():
    f = compute_flow(two_triangles())
    log = []
    optimize_two_level(f, seed=1, trials=1, move_log=log)
    # the first search starts from singletons on the leaf network
    assert log[0][0] == pytest.approx(codelength(f, np.arange(6)), abs=1e-12)
    assert all(after < before for before, after in log)
    assert min(a for _, a in log) == pytest.approx(codelength(f, np.array([0, 0, 0, 1, 1, 1])), abs=1e-12)


def test_optimizer_deterministic():
    rng = np.random.default_rng(2)
    f = flow_from_arcs(*random_digraph(rng, 30, p=0.15), tau=0.15)
    a = optimize_two_level(f, seed=4)
    b = optimize_two_level(f, seed=4)
    assert np.array_equal(a.membership, b.membership)


def test_partition_relabels_and_aligns():
    p = Partition([5, 3, 9], [7, 2, 7])
    assert p.membership.tolist() == [0, 1, 0]
    assert p.aligned([9, 3]).tolist() == [0, 1]
    assert Partition.from_mapping({2: 1, 1: 0}).modules() == [[1], [2]]


def test_hierarchy_disconnected_triangles():
    g = graph_from_edges([(0, 1, 1), (1, 2, 1), (2, 0, 1), (3, 4, 1), (4, 5, 1), (5, 3, 1)])
    hp = detect_hierarchy(g, DetectConfig(max_levels=2, min_module_size=2))
    assert hp.depth == 2
    assert hp.levels[0].tolist() == [0, 0, 0, 1, 1, 1]
    assert hp.levels[1].tolist() == [0, 0, 0, 1, 1, 1]
    hp.check()


def test_hierarchy_one_level():
    hp = detect_hierarchy(two_triangles(), DetectConfig(max_levels=1))
    assert hp.depth == 1


def test_hierarchy_deterministic_and_refines():
    rng = np.random.default_rng(6)
    n = 40
    edges = [(i, j, 10.0, float(rng.uniform(0.1, 1.0))) for i in range(n) for j in range(i + 1, n)
             if (i // 10 == j // 10 and rng.random() < 0.6) or rng.random() < 0.02]
    g = graph_from_edges(edges)
    cfg = DetectConfig(max_levels=3, min_module_size=3, seed=11)
    a, b = detect_hierarchy(g, cfg), detect_hierarchy(g, cfg)
    for x, y in zip(a.levels, b.levels):
        assert np.array_equal(x, y)
    a.check()
    assert a.num_modules(1) >= 2


def test_check_rejects_non_refinement():
    hp = HierarchicalPartition(np.arange(4), [np.array([0, 0, 1, 1]), np.array([0, 1, 1, 2])])
    with pytest.raises(AssertionError):
        hp.check()


def test_baseline_weight_modes():
    g = graph_from_edges([(1, 2, 35.0, 0.2), (2, 3, 80.0, 0.7)])
    assert baseline_weights(g, "o-infomap").arc_weights().tolist() == [1.0] * 4
    assert baseline_weights(g, "D").arc_weights().tolist() == [35.0, 35.0, 80.0, 80.0]
    assert g.arc_weights().tolist() == [0.2, 0.2, 0.7, 0.7]
    with pytest.raises(ValueError):
        DetectConfig(weight_mode="pagerank")


def test_intra_module_mean_weight():
    g = two_triangles(bridge=0.01)
    part = Partition(np.arange(6), [0, 0, 0, 1, 1, 1])
    assert intra_module_mean_weight(g, part) == pytest.approx(1.0)
    assert intra_module_mean_weight(g, Partition.single(np.arange(6))) == pytest.approx(12.02 / 14)


def test_partition_csv_round_trip(tmp_path):
    hp = HierarchicalPartition(np.array([1, 2, 3, 4, 5]),
                               [np.array([0, 0, 1, 1, 1]), np.array([0, 1, 2, 2, 3])])
    write_partition_csv(hp, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "node_id,level1,level2,global_id"
    assert lines[5] == "5,1,1,3"
    back = read_partition_csv(tmp_path / "p.csv")
    for x, y in zip(back.levels, hp.levels):
        assert np.array_equal(x, y)
