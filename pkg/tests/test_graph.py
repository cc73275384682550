import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_graph
from groc.graph import (
    GraphError,
    degree_centrality,
    load_graph,
    preprocess,
    receptive_fields,
    save_graph,
    sbm_generate,
)


def floyd_warshall(g):
    n = g.num_nodes
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0)
    for u, v in g.edges.tolist():
        dist[u, v] = dist[v, u] = 1
    for k in range(n):
        dist = np.minimum(dist, dist[:, [k]] + dist[[k], :])
    return dist


def fields_oracle(g, hops):
    dist = floyd_warshall(g)
    out = {}
    for v in range(g.num_nodes):
        nodes = {u for u in range(g.num_nodes) if dist[v, u] <= hops}
        edges = {i for i, (a, b) in enumerate(g.edges.tolist())
                 if min(dist[v, a], dist[v, b]) <= hops - 1}
        out[v] = (nodes, edges)
    return out


def assert_fields_match(g, hops):
    got = receptive_fields(g, hops)
    want = fields_oracle(g, hops)
    for v in range(g.num_nodes):
        assert set(got[v].nodes) == want[v][0]
        assert set(got[v].edges) == want[v][1]


class TestPreprocess:
    def test_threshold_at_zero(self):
        g = preprocess([[0.0, 2.5], [-1.0, 0.0]])
        np.testing.assert_array_equal(g.features, [[0, 1], [0, 0]])

    def test_symmetrize_dedupe_drop_self_loops(self):
        g = preprocess(np.zeros((3, 1)), [(1, 0), (0, 1), (2, 2)])
        assert g.edges.tolist() == [[0, 1]]
        assert g.weights.tolist() == [1.0]
        assert g.num_nodes == 3

    def test_rejects_empty(self):
        with pytest.raises(GraphError):
            preprocess(np.zeros((0, 2)))

    def test_rejects_non_finite(self):
        with pytest.raises(GraphError):
            preprocess([[np.nan, 1.0]])

    def test_rejects_out_of_range_edge(self):
        with pytest.raises(GraphError):
            preprocess(np.zeros((2, 1)), [(0, 5)])

    def test_rejects_overlapping_splits(self):
        with pytest.raises(GraphError):
            preprocess(np.zeros((3, 1)), [], splits=[[0], [0], [1]])

    def test_isolated_nodes_kept(self):
        g = preprocess(np.ones((4, 1)), [(0, 1)])
        assert g.num_nodes == 4
        assert g.degrees().tolist() == [1, 1, 0, 0]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12).flatmap(lambda n: st.tuples(
        st.just(n),
        st.lists(st.lists(st.floats(-3, 3), min_size=2, max_size=2), min_size=n, max_size=n),
        st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=30))))
    def test_idempotent(self, data):
        n, feats, edges = data
        once = preprocess(feats, edges)
        twice = preprocess(once)
        assert once.num_nodes == twice.num_nodes == n
        np.testing.assert_array_equal(once.features, twice.features)
        np.testing.assert_array_equal(once.edges, twice.edges)
        np.testing.assert_array_equal(once.weights, twice.weights)
        assert np.all(once.edges[:, 0] < once.edges[:, 1]) if once.num_edges else True


class TestReceptiveFields:
    def test_path_one_hop(self, path3):
        rf = receptive_fields(path3, 1)[0]
        assert set(rf.nodes) == {0, 1}
        assert {tuple(path3.edges[i]) for i in rf.edges} == {(0, 1)}

    def test_path_two_hops(self, path3):
        rf = receptive_fields(path3, 2)[0]
        assert set(rf.nodes) == {0, 1, 2}
        assert {tuple(path3.edges[i]) for i in rf.edges} == {(0, 1), (1, 2)}

    def test_sbm_matches_floyd_warshall(self):
        g = sbm_generate(7, [20, 20], 0.2, 0.02)
        assert_fields_match(g, 2)

    def test_rejects_zero_hops(self, path3):
        with pytest.raises(ValueError):
            receptive_fields(path3, 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 50), st.floats(0.02, 0.3), st.integers(1, 3))
    def test_matches_oracle_and_nests(self, seed, n, p, hops):
        g = random_graph(seed, n, p)
        assert_fields_match(g, hops)
        small, big = receptive_fields(g, hops), receptive_fields(g, hops + 1)
        for v in range(n):
            assert v in small[v].nodes
            assert small[v].nodes <= big[v].nodes
            assert small[v].edges <= big[v].edges
            for e in small[v].edges:
                assert set(g.edges[e].tolist()) <= small[v].nodes


class TestSBM:
    def test_cliques(self):
        g = sbm_generate(0, [3, 3], 1.0, 0.0)
        assert g.edges.tolist() == [[0, 1], [0, 2], [1, 2], [3, 4], [3, 5], [4, 5]]

    def test_edgeless(self):
        assert sbm_generate(0, [5, 5], 0.0, 0.0).num_edges == 0

    def test_edge_count_within_binomial_band(self):
        g = sbm_generate(7, [100, 100], 0.05, 0.005)
        pairs_in = 2 * (100 * 99 // 2)
        pairs_out = 100 * 100
        mean = pairs_in * 0.05 + pairs_out * 0.005
        sd = np.sqrt(pairs_in * 0.05 * 0.95 + pairs_out * 0.005 * 0.995)
        assert abs(g.num_edges - mean) <= 3 * sd

    def test_labels_and_features(self):
        g = sbm_generate(1, [30, 10], 0.1, 0.01, flip_prob=0.0)
        assert g.labels.tolist() == [0] * 30 + [1] * 10
        np.testing.assert_array_equal(g.features, np.eye(2)[g.labels])

    def test_feature_copies(self):
        g = sbm_generate(1, [5, 5], 0.5, 0.1, flip_prob=0.0, feature_copies=3)
        assert g.num_features == 6
        np.testing.assert_array_equal(g.features[:, :2], g.features[:, 4:])

    def test_deterministic(self):
        a = sbm_generate(7, [50, 50], 0.1, 0.01)
        b = sbm_generate(7, [50, 50], 0.1, 0.01)
        assert a.edges.tobytes() == b.edges.tobytes()
        assert a.features.tobytes() == b.features.tobytes()
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.splits, b.splits))

    def test_rejects_empty_blocks(self):
        with pytest.raises(GraphError):
            sbm_generate(0, [0, 0], 0.5, 0.1)

    def test_splits_disjoint_and_cover(self):
        g = sbm_generate(3, [40, 60], 0.1, 0.01)
        ids = np.concatenate(g.splits)
        assert sorted(ids.tolist()) == list(range(100))


class TestDegreeCentrality:
    def test_triangle(self):
        g = preprocess(np.ones((3, 1)), [(0, 1), (1, 2), (0, 2)])
        assert degree_centrality(g).tolist() == [2.0, 2.0, 2.0]

    def test_star_leaf_edge(self):
        g = preprocess(np.ones((4, 1)), [(0, 1), (0, 2), (0, 3)])
        assert degree_centrality(g).tolist() == [2.0, 2.0, 2.0]

    def test_matches_recount(self):
        g = sbm_generate(7, [100, 100], 0.05, 0.005)
        deg = {}
        for u, v in g.edges.tolist():
            deg[u] = deg.get(u, 0) + 1
            deg[v] = deg.get(v, 0) + 1
        want = [(deg[u] + deg[v]) / 2 for u, v in g.edges.tolist()]
        assert degree_centrality(g).tolist() == want


def test_directory_round_trip(tmp_path, sbm40):
    save_graph(sbm40, tmp_path / "g")
    back = load_graph(tmp_path / "g")
    np.testing.assert_array_equal(back.features, sbm40.features)
    np.testing.assert_array_equal(back.edges, sbm40.edges)
    np.testing.assert_array_equal(back.labels, sbm40.labels)
    for a, b in zip(back.splits, sbm40.splits):
        np.testing.assert_array_equal(a, b)
    assert set(json.loads((tmp_path / "g" / "splits.json").read_text())) == {"train", "val", "test"}


def test_loader_preprocesses_raw_files(tmp_path):
    d = tmp_path / "raw"
    d.mkdir()
    (d / "features.csv").write_text("0,3\n-1,0\n2,2\n")
    (d / "edges.csv").write_text("1,0\n0,1\n2,2\n2,1\n")
    g = load_graph(d)
    np.testing.assert_array_equal(g.features, [[0, 1], [0, 0], [1, 1]])
    assert g.edges.tolist() == [[0, 1], [1, 2]]


def test_loader_rejects_missing_files(tmp_path):
    with pytest.raises(GraphError):
        load_graph(tmp_path)


@pytest.mark.skipif(not os.environ.get("GROC_CORA"), reason="GROC_CORA not set")
def test_cora_shape():
    g = load_graph(os.environ["GROC_CORA"])
    assert g.num_nodes == 2708 and g.num_classes == 7
    assert set(np.unique(g.features)) <= {0.0, 1.0}
