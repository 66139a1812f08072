import numpy as np
import pytest

from toporag.encoder import (
    EMBED_DIM,
    EncoderModel,
    cosine_sim,
    encode,
    init_model,
    load_model,
    normalized_adjacency,
    save_model,
)
from toporag.errors import EmptyGraph, ZeroVector
from toporag.topo import TopologyGraph, build_graph, parse_topology

from conftest import topology_json


def zero_model():
    return EncoderModel(
        [np.zeros((4, 32)), np.zeros((32, 32)), np.zeros((32, 32))],
        [np.zeros(32), np.zeros(32), np.zeros(32)],
    )


def single_node_graph():
    return build_graph(parse_topology(topology_json("one", routers={"r1": {}})))


def random_graph(rng, n_max=9):
    n = int(rng.integers(1, n_max))
    edges = set()
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < 0.4:
                edges.add((u, v))
    features = np.zeros((n, 4))
    kinds = rng.integers(0, 2, size=n)
    features[:, 0] = kinds
    features[:, 1] = 1 - kinds
    for u, v in edges:
        features[u, 2] += 1
        features[v, 2] += 1
    features[:, 3] = rng.integers(0, 6, size=n)
    return TopologyGraph(
        case_id="rand", nodes=tuple(f"d{i}" for i in range(n)), edges=frozenset(edges), features=features
    )


def permuted(graph: TopologyGraph, perm):
    inv = {old: new for new, old in enumerate(perm)}
    return TopologyGraph(
        case_id=graph.case_id,
        nodes=tuple(graph.nodes[i] for i in perm),
        edges=frozenset((min(inv[u], inv[v]), max(inv[u], inv[v])) for u, v in graph.edges),
        features=graph.features[list(perm)].copy(),
    )


class TestEncode:
    def test_zero_model_hits_guard(self, two_router_graph):
        emb = encode(zero_model(), two_router_graph)
        assert emb.is_zero
        assert np.array_equal(emb.vector, np.zeros(EMBED_DIM))

    def test_single_node_hand_example(self):
        # A_hat = [1]; W1 row of ones => H1 = ones(32); W2 = W3 = I => H3 = ones(32)
        # mean pool = ones(32), so z = 1/sqrt(32) everywhere.
        w1 = np.zeros((4, 32))
        w1[0, :] = 1.0
        model = EncoderModel(
            [w1, np.eye(32), np.eye(32)], [np.zeros(32), np.zeros(32), np.zeros(32)]
        )
        emb = encode(model, single_node_graph())
        assert np.allclose(emb.vector, np.full(32, 1.0 / np.sqrt(32.0)), atol=1e-12)
        assert abs(np.linalg.norm(emb.vector) - 1.0) < 1e-9

    def test_empty_graph_rejected(self):
        empty = build_graph(parse_topology(topology_json("empty")))
        with pytest.raises(EmptyGraph):
            encode(init_model(0), empty)

    def test_permutation_invariance_isomorphic_labels(self, triangle_graph):
        model = init_model(3)
        base = encode(model, triangle_graph).vector
        for perm in ([1, 2, 0], [2, 1, 0]):
            assert np.allclose(encode(model, permuted(triangle_graph, perm)).vector, base, atol=1e-12)

    def test_permutation_invariance_random(self):
        rng = np.random.default_rng(42)
        model = init_model(7)
        for _ in range(25):
            g = random_graph(rng)
            perm = list(rng.permutation(g.n_nodes))
            d = np.abs(encode(model, g).vector - encode(model, permuted(g, perm)).vector).max()
            assert d < 1e-9

    def test_unit_norm_or_zero(self):
        rng = np.random.default_rng(11)
        model = init_model(5)
        for _ in range(50):
            v = encode(model, random_graph(rng)).vector
            norm = np.linalg.norm(v)
            assert norm == 0.0 or abs(norm - 1.0) < 1e-6

    def test_deterministic_bitwise(self, triangle_graph):
        model = init_model(9)
        a = encode(model, triangle_graph).vector
        b = encode(model, triangle_graph).vector
        assert np.array_equal(a, b)


class TestNormalizedAdjacency:
    def test_ring_rows_sum_equal(self):
        # every node of a k-regular graph has the same A_hat row sum
        n = 6
        edges = frozenset((i, (i + 1) % n) if i < (i + 1) % n else ((i + 1) % n, i) for i in range(n))
        g = TopologyGraph("ring", tuple(f"r{i}" for i in range(n)), edges, np.zeros((n, 4)))
        rows = normalized_adjacency(g).sum(axis=1)
        assert np.allclose(rows, rows[0], atol=1e-12)

    def test_isolated_node_self_loop(self):
        g = TopologyGraph("iso", ("a",), frozenset(), np.zeros((1, 4)))
        assert np.allclose(normalized_adjacency(g), np.array([[1.0]]))


class TestCosineSim:
    def e(self, vec):
        v = np.zeros(EMBED_DIM)
        v[: len(vec)] = vec
        from toporag.encoder import Embedding

        return Embedding(vector=v, case_id="x")

    def test_identical(self):
        assert cosine_sim(self.e([1.0]), self.e([1.0])) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim(self.e([1.0, 0.0]), self.e([0.0, 1.0])) == pytest.approx(0.0)

    def test_hand_value(self):
        s = np.sqrt(0.5)
        assert cosine_sim(self.e([1.0, 0.0]), self.e([s, s])) == pytest.approx(s, abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroVector):
            cosine_sim(self.e([0.0]), self.e([1.0]))


class TestModelSerialization:
    def test_round_trip_bytes(self, tmp_path):
        model = init_model(123)
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        for w1, w2 in zip(model.weights, loaded.weights):
            assert np.array_equal(w1, w2)
        save_model(loaded, tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()

    def test_fingerprint_tracks_content(self):
        assert init_model(1).fingerprint() == init_model(1).fingerprint()
        assert init_model(1).fingerprint() != init_model(2).fingerprint()

    def test_bad_shapes_rejected(self):
        with pytest.raises(ValueError):
            EncoderModel([np.zeros((4, 31)), np.zeros((32, 32)), np.zeros((32, 32))], [np.zeros(32)] * 3)
