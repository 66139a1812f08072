from pathlib import Path

import numpy as np
import pytest

from toporag.encoder import encode, init_model
from toporag.errors import (
    EmptyIndex,
    FingerprintMismatch,
    MissingDriver,
    MissingKnowledgeFile,
    ParseFailure,
    UnknownReference,
)
from toporag.retrieval import (
    IndexEntry,
    ReferenceIndex,
    assemble_context,
    assemble_no_rag_context,
    build_index,
    load_index,
    retrieve,
    save_index,
)
from toporag.topo import build_graph, parse_topology
from synthdata import family_doc

from conftest import two_router_json


def write_case(root, doc_json, case_id, driver_text="def test_ok():\n    pass\n"):
    case_dir = root / case_id
    case_dir.mkdir(parents=True)
    topo = case_dir / "topology.json"
    topo.write_text(doc_json, encoding="utf-8")
    driver = case_dir / "driver.py"
    driver.write_text(driver_text, encoding="utf-8")
    return {"topology_path": str(topo), "driver_path": str(driver)}


@pytest.fixture
def reference_cases(tmp_path):
    rng = np.random.default_rng(0)
    cases = []
    import json

    for fam, n in (("ring", 6), ("star", 7), ("chain", 5)):
        doc = family_doc(fam, n, f"{fam}_{n}", rng, attr_max=0)
        raw = {
            "case_id": doc.case_id,
            "routers": doc.routers,
            "switches": doc.switches,
            "links": [{"a": l.a, "a_if": l.a_if, "b": l.b, "b_if": l.b_if} for l in doc.links],
        }
        cases.append(write_case(tmp_path, json.dumps(raw), doc.case_id))
    return cases


class TestBuildIndex:
    def test_empty_index_is_valid(self):
        index = build_index(init_model(1), [])
        assert len(index) == 0

    def test_three_cases_unit_norm(self, reference_cases):
        index = build_index(init_model(1), reference_cases)
        assert len(index) == 3
        for entry in index.entries:
            assert abs(np.linalg.norm(entry.embedding) - 1.0) < 1e-6

    def test_missing_driver(self, tmp_path):
        case = write_case(tmp_path, two_router_json(), "c1")
        (tmp_path / "c1" / "driver.py").unlink()
        with pytest.raises(MissingDriver):
            build_index(init_model(1), [case])

    def test_parse_failure(self, tmp_path):
        case = write_case(tmp_path, "{broken", "c1")
        with pytest.raises(ParseFailure):
            build_index(init_model(1), [case])

    def test_round_trip_bytes(self, reference_cases, tmp_path):
        index = build_index(init_model(1), reference_cases)
        path = tmp_path / "refs.index.json"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.model_fingerprint == index.model_fingerprint
        save_index(loaded, tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


class TestRetrieve:
    def test_self_retrieval(self, reference_cases):
        model = init_model(1)
        index = build_index(model, reference_cases)
        for entry in index.entries:
            query = build_graph(parse_topology(open(entry.topology_path).read()))
            top = retrieve(index, query, model, k=1)
            assert top[0][0] == entry.case_id
            assert top[0][1] >= 1.0 - 1e-6

    def test_empty_index(self, two_router_graph):
        index = ReferenceIndex(entries=(), model_fingerprint=init_model(1).fingerprint())
        with pytest.raises(EmptyIndex):
            retrieve(index, two_router_graph, init_model(1), k=1)

    def test_fingerprint_mismatch(self, reference_cases, two_router_graph):
        index = build_index(init_model(1), reference_cases)
        with pytest.raises(FingerprintMismatch):
            retrieve(index, two_router_graph, init_model(2), k=1)

    def test_tie_breaks_lexicographic(self, two_router_graph):
        model = init_model(1)
        emb = encode(model, two_router_graph).vector
        index = ReferenceIndex(
            entries=(
                IndexEntry("zeta", emb.copy(), "z.json", "z.py"),
                IndexEntry("alpha", emb.copy(), "a.json", "a.py"),
            ),
            model_fingerprint=model.fingerprint(),
        )
        got = retrieve(index, two_router_graph, model, k=2)
        assert [c for c, _ in got] == ["alpha", "zeta"]

    def test_hand_placed_angles_match_bruteforce(self, two_router_graph):
        model = init_model(1)
        q = encode(model, two_router_graph).vector
        # build an orthonormal companion direction to rotate against
        rng = np.random.default_rng(4)
        u = rng.normal(size=q.shape)
        u -= (u @ q) * q
        u /= np.linalg.norm(u)
        entries = []
        for name, deg in (("a0", 0.0), ("a60", 60.0), ("a90", 90.0)):
            theta = np.radians(deg)
            entries.append(IndexEntry(name, np.cos(theta) * q + np.sin(theta) * u, "t", "d"))
        index = ReferenceIndex(entries=tuple(entries), model_fingerprint=model.fingerprint())
        got = retrieve(index, two_router_graph, model, k=3)
        oracle = sorted(
            ((e.case_id, float(e.embedding @ q)) for e in entries), key=lambda cs: (-cs[1], cs[0])
        )
        assert [c for c, _ in got] == [c for c, _ in oracle]
        assert got[0][1] == pytest.approx(1.0, abs=1e-9)
        assert got[1][1] == pytest.approx(0.5, abs=1e-9)
        assert got[2][1] == pytest.approx(0.0, abs=1e-9)

    def test_full_ranking_is_sorted_permutation(self, reference_cases, two_router_graph):
        model = init_model(1)
        index = build_index(model, reference_cases)
        ranking = retrieve(index, two_router_graph, model, k=len(index))
        assert len(ranking) == len(index)
        sims = [s for _, s in ranking]
        assert sims == sorted(sims, reverse=True)
        assert {c for c, _ in ranking} == {e.case_id for e in index.entries}


class TestAssembleContext:
    def test_four_parts_non_empty(self, reference_cases, tmp_path):
        model = init_model(1)
        index = build_index(model, reference_cases)
        knowledge = tmp_path / "knowledge.txt"
        knowledge.write_text("BGP peers must share a subnet.\n", encoding="utf-8")
        ctx = assemble_context(index, two_router_json(), (index.entries[0].case_id, 0.9), knowledge)
        assert ctx.has_reference
        for part in (ctx.target_topology, ctx.reference_topology, ctx.reference_driver, ctx.background_knowledge):
            assert part
        assert ctx.similarity == 0.9

    def test_driver_bytes_round_trip(self, reference_cases, tmp_path):
        model = init_model(1)
        index = build_index(model, reference_cases)
        knowledge = tmp_path / "k.txt"
        knowledge.write_text("x", encoding="utf-8")
        entry = index.entries[1]
        ctx = assemble_context(index, "{}", (entry.case_id, 0.5), knowledge)
        assert ctx.reference_driver.encode() == open(entry.driver_path, "rb").read()

    def test_missing_knowledge(self, reference_cases, tmp_path):
        index = build_index(init_model(1), reference_cases)
        with pytest.raises(MissingKnowledgeFile):
            assemble_context(index, "{}", (index.entries[0].case_id, 0.5), tmp_path / "nope.txt")

    def test_unknown_reference(self, reference_cases, tmp_path):
        index = build_index(init_model(1), reference_cases)
        k = tmp_path / "k.txt"
        k.write_text("x")
        with pytest.raises(UnknownReference):
            assemble_context(index, "{}", ("ghost", 0.5), k)

    def test_no_rag_context(self, tmp_path):
        k = tmp_path / "k.txt"
        k.write_text("facts")
        ctx = assemble_no_rag_context("{}", k)
        assert not ctx.has_reference
        assert ctx.reference_topology == "" and ctx.reference_driver == ""
        assert ctx.background_knowledge == "facts"

    def test_empty_reference_part_rejected(self, reference_cases, tmp_path):
        index = build_index(init_model(1), reference_cases)
        entry = index.entries[0]
        Path(entry.driver_path).write_text("")
        k = tmp_path / "k.txt"
        k.write_text("x")
        from toporag.errors import ToporagError

        with pytest.raises(ToporagError, match="empty parts"):
            assemble_context(index, "{}", (entry.case_id, 0.5), k)


class TestScaleInvariance:
    def test_ranking_invariant_to_query_scaling(self, reference_cases, two_router_graph):
        # embeddings are unit-normalized before comparison, so any positive
        # rescaling of the pre-normalization representation leaves the
        # retrieved ordering unchanged
        model = init_model(1)
        index = build_index(model, reference_cases)
        q = encode(model, two_router_graph).vector
        for scale in (0.001, 1.0, 37.5):
            scored = sorted(
                ((e.case_id, float((scale * q) @ e.embedding / np.linalg.norm(scale * q))) for e in index.entries),
                key=lambda cs: (-cs[1], cs[0]),
            )
            base = retrieve(index, two_router_graph, model, k=len(index))
            assert [c for c, _ in scored] == [c for c, _ in base]
