import json
import re

import pytest

from toporag.topo import build_graph, parse_topology

_ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if match and report.when == "call":
        number, slug = int(match.group(1)), match.group(2)
        _ACCEPTANCE_RESULTS[number] = (slug, report.outcome.upper())


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_RESULTS):
        slug, outcome = _ACCEPTANCE_RESULTS[number]
        mark = "PASS" if outcome == "PASSED" else outcome
        terminalreporter.write_line(f"criterion {number:2d} [{mark}] {slug.replace('_', ' ')}")


def topology_json(case_id, routers=None, switches=None, links=None, **extra):
    doc = {
        "case_id": case_id,
        "routers": routers or {},
        "switches": switches or {},
        "links": links or [],
    }
    doc.update(extra)
    return json.dumps(doc)


def two_router_json(case_id="two_router"):
    return topology_json(
        case_id,
        routers={"r1": {}, "r2": {}},
        links=[{"a": "r1", "a_if": "r1-eth0", "b": "r2", "b_if": "r2-eth0"}],
    )


def triangle_json(case_id="triangle"):
    return topology_json(
        case_id,
        routers={"r1": {}, "r2": {}, "r3": {}},
        links=[
            {"a": "r1", "a_if": "r1-eth0", "b": "r2", "b_if": "r2-eth0"},
            {"a": "r2", "a_if": "r2-eth1", "b": "r3", "b_if": "r3-eth0"},
            {"a": "r1", "a_if": "r1-eth1", "b": "r3", "b_if": "r3-eth1"},
        ],
    )


@pytest.fixture
def two_router_doc():
    return parse_topology(two_router_json())


@pytest.fixture
def two_router_graph(two_router_doc):
    return build_graph(two_router_doc)


@pytest.fixture
def triangle_graph():
    return build_graph(parse_topology(triangle_json()))
