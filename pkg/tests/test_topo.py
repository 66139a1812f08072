import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toporag.errors import (
    DuplicateInterface,
    InfeasibleSizes,
    MalformedJson,
    UnknownLinkEndpoint,
)
from toporag.topo import SplitManifest, build_graph, make_splits, parse_topology

from conftest import topology_json, two_router_json


class TestParseTopology:
    def test_empty_topology(self):
        doc = parse_topology('{"case_id":"t1","routers":{},"switches":{},"links":[]}')
        assert doc.case_id == "t1"
        assert doc.devices() == set()
        assert doc.links == ()

    def test_two_router_link(self):
        doc = parse_topology(two_router_json())
        assert set(doc.routers) == {"r1", "r2"}
        assert len(doc.links) == 1
        assert doc.interfaces_of("r1") == ["r1-eth0"]

    def test_unknown_endpoint(self):
        text = topology_json(
            "t", routers={"r1": {}}, links=[{"a": "r1", "a_if": "e0", "b": "r9", "b_if": "e0"}]
        )
        with pytest.raises(UnknownLinkEndpoint) as exc:
            parse_topology(text)
        assert exc.value.device == "r9"

    def test_duplicate_interface(self):
        text = topology_json(
            "t",
            routers={"r1": {}, "r2": {}, "r3": {}},
            links=[
                {"a": "r1", "a_if": "e0", "b": "r2", "b_if": "e0"},
                {"a": "r1", "a_if": "e0", "b": "r3", "b_if": "e0"},
            ],
        )
        with pytest.raises(DuplicateInterface) as exc:
            parse_topology(text)
        assert (exc.value.device, exc.value.iface) == ("r1", "e0")

    def test_malformed_json(self):
        with pytest.raises(MalformedJson):
            parse_topology("{not json")

    def test_bad_case_id(self):
        with pytest.raises(MalformedJson):
            parse_topology(topology_json("has space"))
        with pytest.raises(MalformedJson):
            parse_topology('{"routers":{},"switches":{},"links":[]}')

    def test_unknown_keys_preserved(self):
        doc = parse_topology(topology_json("t", routers={"r1": {"bgp": {"asn": 65001}, "zamboni": 3}}))
        assert doc.routers["r1"]["zamboni"] == 3
        assert doc.config_count("r1") == 2

    def test_nested_links_normalized(self):
        text = json.dumps(
            {
                "case_id": "frr_style",
                "routers": {"r1": {"links": {"r2": {"ipv4": "auto"}}}, "r2": {"links": {"r1": {}}}},
                "switches": {},
                "links": [],
            }
        )
        doc = parse_topology(text)
        assert len(doc.links) == 1
        assert set(doc.links[0].endpoints()) == {"r1", "r2"}
        # the nested "links" key does not count as configuration
        assert doc.config_count("r1") == 0


class TestBuildGraph:
    def test_two_router_features(self, two_router_doc):
        graph = build_graph(two_router_doc)
        assert graph.n_nodes == 2
        assert graph.n_edges == 1
        assert np.array_equal(graph.features, np.array([[1, 0, 1, 0], [1, 0, 1, 0]], dtype=float))

    def test_switch_feature_row(self):
        text = topology_json(
            "sw",
            routers={"r1": {}, "r2": {}, "r3": {}},
            switches={"s1": {"mgmt": 1, "vlan": 2}},
            links=[
                {"a": "r1", "a_if": "r1-e0", "b": "s1", "b_if": "s1-e0"},
                {"a": "r2", "a_if": "r2-e0", "b": "s1", "b_if": "s1-e1"},
                {"a": "r3", "a_if": "r3-e0", "b": "s1", "b_if": "s1-e2"},
            ],
        )
        graph = build_graph(parse_topology(text))
        row = graph.features[graph.nodes.index("s1")]
        assert list(row) == [0.0, 1.0, 3.0, 2.0]

    def test_empty_doc(self):
        graph = build_graph(parse_topology(topology_json("empty")))
        assert graph.n_nodes == 0
        assert graph.n_edges == 0
        assert graph.features.shape == (0, 4)

    def test_link_order_irrelevant(self):
        links = [
            {"a": "r1", "a_if": "r1-e0", "b": "r2", "b_if": "r2-e0"},
            {"a": "r2", "a_if": "r2-e1", "b": "r3", "b_if": "r3-e0"},
        ]
        a = build_graph(parse_topology(topology_json("t", routers={"r1": {}, "r2": {}, "r3": {}}, links=links)))
        b = build_graph(parse_topology(topology_json("t", routers={"r1": {}, "r2": {}, "r3": {}}, links=links[::-1])))
        assert a.nodes == b.nodes
        assert a.edges == b.edges
        assert np.array_equal(a.features, b.features)

    def test_degree_sum_is_twice_edges(self, triangle_graph):
        assert triangle_graph.features[:, 2].sum() == 2 * triangle_graph.n_edges


class TestMakeSplits:
    CORPUS = [f"c{i}" for i in range(10)]
    VERIFIED = {"c0", "c1", "c2"}

    def test_cardinalities_and_disjointness(self):
        m = make_splits(self.CORPUS, self.VERIFIED, {"val": 2, "test": 3, "reference": 2, "query": 2}, seed=7)
        assert len(m.val_ids) == 2 and len(m.test_ids) == 3
        assert len(m.reference_ids) == 2 and len(m.query_ids) == 2
        assert len(m.train_ids) == 10 - 3 - 2 - 3
        groups = [m.verified_ids, m.train_ids, m.val_ids, m.test_ids]
        for i, g1 in enumerate(groups):
            for g2 in groups[i + 1 :]:
                assert not (g1 & g2)
        assert not (m.reference_ids & m.query_ids)
        assert m.reference_ids <= m.verified_ids
        assert m.query_ids <= m.test_ids

    def test_infeasible_query(self):
        with pytest.raises(InfeasibleSizes):
            make_splits(self.CORPUS, self.VERIFIED, {"val": 2, "test": 3, "reference": 2, "query": 4}, seed=7)

    def test_infeasible_pool(self):
        with pytest.raises(InfeasibleSizes):
            make_splits(self.CORPUS, self.VERIFIED, {"val": 5, "test": 5, "reference": 1, "query": 1}, seed=7)

    def test_deterministic_and_byte_stable(self):
        sizes = {"val": 2, "test": 3, "reference": 2, "query": 2}
        m1 = make_splits(self.CORPUS, self.VERIFIED, sizes, seed=7)
        m2 = make_splits(self.CORPUS, self.VERIFIED, sizes, seed=7)
        assert m1 == m2
        assert m1.to_json() == m2.to_json()
        assert SplitManifest.from_json(m1.to_json()) == m1

    def test_seed_changes_split(self):
        sizes = {"val": 2, "test": 3, "reference": 2, "query": 2}
        manifests = {make_splits(self.CORPUS, self.VERIFIED, sizes, seed=s).to_json() for s in range(20)}
        assert len(manifests) > 1

    @settings(max_examples=50, deadline=None)
    @given(
        n=st.integers(4, 40),
        n_verified=st.integers(0, 10),
        seed=st.integers(0, 2**31),
        data=st.data(),
    )
    def test_property_disjoint(self, n, n_verified, seed, data):
        corpus = [f"g{i}" for i in range(n)]
        n_verified = min(n_verified, n)
        verified = set(corpus[:n_verified])
        pool = n - n_verified
        val = data.draw(st.integers(0, pool))
        test = data.draw(st.integers(0, pool - val))
        sizes = {
            "val": val,
            "test": test,
            "reference": data.draw(st.integers(0, n_verified)),
            "query": data.draw(st.integers(0, test)),
        }
        m = make_splits(corpus, verified, sizes, seed=seed)
        union = m.train_ids | m.val_ids | m.test_ids | m.verified_ids
        assert len(union) == len(m.train_ids) + len(m.val_ids) + len(m.test_ids) + len(m.verified_ids)
        assert union == set(corpus)
