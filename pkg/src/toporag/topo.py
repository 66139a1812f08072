"""Topology JSON parsing, graph construction, and corpus split management.

The on-disk schema is a single JSON object:

    {
      "case_id": "bgp_two_router",
      "routers":  {"r1": {...attrs...}, ...},
      "switches": {"s1": {...attrs...}, ...},
      "links": [{"a": "r1", "a_if": "r1-eth0", "b": "r2", "b_if": "r2-eth0"}, ...]
    }

Graphs are undirected with four node features per device:
[is_router, is_switch, degree, config_count].
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateInterface,
    InfeasibleSizes,
    MalformedJson,
    UnknownLinkEndpoint,
)
from .util import to_json

CASE_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

NUM_FEATURES = 4


@dataclass(frozen=True)
class Link:
    a: str
    a_if: str
    b: str
    b_if: str

    def endpoints(self) -> tuple[str, str]:
        return self.a, self.b


@dataclass(frozen=True)
class TopologyDoc:
    """Parsed topology: device attribute maps plus an explicit link list."""

    case_id: str
    routers: dict[str, dict]
    switches: dict[str, dict]
    links: tuple[Link, ...]

    def devices(self) -> set[str]:
        return set(self.routers) | set(self.switches)

    def interfaces_of(self, device: str) -> list[str]:
        """Interface names of a device, in first-seen link order."""
        seen: list[str] = []
        for link in self.links:
            if link.a == device and link.a_if not in seen:
                seen.append(link.a_if)
            if link.b == device and link.b_if not in seen:
                seen.append(link.b_if)
        return seen

    def config_count(self, device: str) -> int:
        attrs = self.routers.get(device) if device in self.routers else self.switches.get(device)
        if attrs is None:
            raise KeyError(device)
        return sum(1 for key in attrs if key != "links")


@dataclass(frozen=True)
class TopologyGraph:
    """Undirected graph with a |V| x 4 feature matrix.

    Node ids index into ``nodes``; node order is routers then switches,
    each lexicographically sorted, so feature matrices are canonical.
    """

    case_id: str
    nodes: tuple[str, ...]
    edges: frozenset[tuple[int, int]]
    features: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def max_degree(self) -> int:
        if not self.nodes:
            return 0
        return int(self.features[:, 2].max())

    def degree(self, node_id: int) -> int:
        return sum(1 for u, v in self.edges if node_id in (u, v))


def parse_topology(json_text: str) -> TopologyDoc:
    """Parse topology JSON text into a validated TopologyDoc.

    Unknown keys inside device attribute maps are preserved. Devices may
    alternatively carry an FRR-style nested ``links`` map keyed by peer
    device name; those are normalized into the explicit link list with
    generated interface names.
    """
    try:
        raw = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise MalformedJson("topology document must be a JSON object")

    case_id = raw.get("case_id", "")
    if not isinstance(case_id, str) or not CASE_ID_RE.match(case_id):
        raise MalformedJson(f"case_id missing or not file-system safe: {case_id!r}")

    routers = _device_map(raw.get("routers", {}), "routers")
    switches = _device_map(raw.get("switches", {}), "switches")
    devices = set(routers) | set(switches)

    links = [_parse_link(entry) for entry in _link_entries(raw)]
    links.extend(_nested_links(routers, switches))

    used: dict[str, set[str]] = {}
    for link in links:
        for dev, iface in ((link.a, link.a_if), (link.b, link.b_if)):
            if dev not in devices:
                raise UnknownLinkEndpoint(dev)
            if iface in used.setdefault(dev, set()):
                raise DuplicateInterface(dev, iface)
            used[dev].add(iface)

    return TopologyDoc(case_id=case_id, routers=routers, switches=switches, links=tuple(links))


def _device_map(raw, section: str) -> dict[str, dict]:
    if not isinstance(raw, dict):
        raise MalformedJson(f"{section} must be an object")
    out = {}
    for name, attrs in raw.items():
        if not isinstance(name, str) or not name:
            raise MalformedJson(f"bad device name in {section}: {name!r}")
        out[name] = dict(attrs) if isinstance(attrs, dict) else {}
    return out


def _link_entries(raw: dict) -> list[dict]:
    entries = raw.get("links", [])
    if not isinstance(entries, list):
        raise MalformedJson("links must be an array")
    return entries


def _parse_link(entry) -> Link:
    if not isinstance(entry, dict):
        raise MalformedJson(f"link entry must be an object: {entry!r}")
    try:
        return Link(a=str(entry["a"]), a_if=str(entry["a_if"]), b=str(entry["b"]), b_if=str(entry["b_if"]))
    except KeyError as exc:
        raise MalformedJson(f"link entry missing key {exc}") from exc


def _nested_links(routers: dict[str, dict], switches: dict[str, dict]) -> list[Link]:
    """Best-effort normalization of per-device {"links": {peer: {...}}} maps.

    Each device pair is emitted once (from the lexicographically smaller
    side) with generated interface names, mirroring the style used by FRR
    topology JSONs that key links on the peer device.
    """
    all_devices = {**switches, **routers}
    counters: dict[str, int] = {}
    out: list[Link] = []
    for dev in sorted(all_devices):
        nested = all_devices[dev].get("links")
        if not isinstance(nested, dict):
            continue
        for peer in sorted(nested):
            if peer not in all_devices:
                raise UnknownLinkEndpoint(peer)
            if peer < dev and isinstance(all_devices[peer].get("links"), dict) and dev in all_devices[peer]["links"]:
                continue  # already emitted from the other side
            a, b = (dev, peer) if dev <= peer else (peer, dev)
            a_if = f"{a}-eth{counters.setdefault(a, 0)}"
            counters[a] += 1
            b_if = f"{b}-eth{counters.setdefault(b, 0)}"
            counters[b] += 1
            out.append(Link(a=a, a_if=a_if, b=b, b_if=b_if))
    return out


def build_graph(doc: TopologyDoc) -> TopologyGraph:
    """Build the canonical feature graph for a parsed topology.

    Self-loop links and repeated links between the same device pair collapse
    into the simple undirected edge set; the degree feature is computed on
    that edge set.
    """
    nodes = tuple(sorted(doc.routers) + sorted(doc.switches))
    index = {name: i for i, name in enumerate(nodes)}

    edges = set()
    for link in doc.links:
        u, v = index[link.a], index[link.b]
        if u == v:
            continue
        edges.add((min(u, v), max(u, v)))

    features = np.zeros((len(nodes), NUM_FEATURES), dtype=float)
    for i, name in enumerate(nodes):
        is_router = name in doc.routers
        features[i, 0] = 1.0 if is_router else 0.0
        features[i, 1] = 0.0 if is_router else 1.0
        features[i, 3] = float(doc.config_count(name))
    for u, v in edges:
        features[u, 2] += 1.0
        features[v, 2] += 1.0

    return TopologyGraph(case_id=doc.case_id, nodes=nodes, edges=frozenset(edges), features=features)


def load_topology(path: str | Path) -> TopologyDoc:
    return parse_topology(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class SplitManifest:
    """Disjoint corpus splits plus the retrieval reference/query samples."""

    verified_ids: frozenset[str]
    train_ids: frozenset[str]
    val_ids: frozenset[str]
    test_ids: frozenset[str]
    reference_ids: frozenset[str]
    query_ids: frozenset[str]
    seed: int
    sizes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return to_json(
            {
                "format_version": 1,
                "seed": self.seed,
                "sizes": self.sizes,
                "verified_ids": sorted(self.verified_ids),
                "train_ids": sorted(self.train_ids),
                "val_ids": sorted(self.val_ids),
                "test_ids": sorted(self.test_ids),
                "reference_ids": sorted(self.reference_ids),
                "query_ids": sorted(self.query_ids),
            }
        )

    @staticmethod
    def from_json(text: str) -> "SplitManifest":
        raw = json.loads(text)
        return SplitManifest(
            verified_ids=frozenset(raw["verified_ids"]),
            train_ids=frozenset(raw["train_ids"]),
            val_ids=frozenset(raw["val_ids"]),
            test_ids=frozenset(raw["test_ids"]),
            reference_ids=frozenset(raw["reference_ids"]),
            query_ids=frozenset(raw["query_ids"]),
            seed=int(raw["seed"]),
            sizes=dict(raw.get("sizes", {})),
        )


def make_splits(
    corpus_ids: list[str],
    verified_ids: set[str],
    sizes: dict[str, int],
    seed: int,
) -> SplitManifest:
    """Deterministically split a corpus into train/val/test plus R and Q.

    Verified ids are removed from the pool before the train/val/test split;
    references are sampled from the verified set and queries from the test
    split, so all output sets are pairwise disjoint by construction.

    ``sizes`` keys: val, test, reference, query.
    """
    corpus = sorted(set(corpus_ids))
    verified = sorted(set(verified_ids))
    if not set(verified) <= set(corpus):
        raise InfeasibleSizes("verified_ids must be a subset of corpus_ids")

    n_val = int(sizes.get("val", 0))
    n_test = int(sizes.get("test", 0))
    n_ref = int(sizes.get("reference", 0))
    n_query = int(sizes.get("query", 0))
    if min(n_val, n_test, n_ref, n_query) < 0:
        raise InfeasibleSizes("sizes must be non-negative")

    pool = [c for c in corpus if c not in set(verified)]
    if n_val + n_test > len(pool):
        raise InfeasibleSizes(f"val+test={n_val + n_test} exceeds pool of {len(pool)} unverified ids")
    if n_ref > len(verified):
        raise InfeasibleSizes(f"reference={n_ref} exceeds {len(verified)} verified ids")
    if n_query > n_test:
        raise InfeasibleSizes(f"query={n_query} exceeds test size {n_test}")

    rng = random.Random(seed)
    shuffled = pool[:]
    rng.shuffle(shuffled)
    val = shuffled[:n_val]
    test = shuffled[n_val : n_val + n_test]
    train = shuffled[n_val + n_test :]
    reference = rng.sample(verified, n_ref)
    query = rng.sample(sorted(test), n_query)

    return SplitManifest(
        verified_ids=frozenset(verified),
        train_ids=frozenset(train),
        val_ids=frozenset(val),
        test_ids=frozenset(test),
        reference_ids=frozenset(reference),
        query_ids=frozenset(query),
        seed=seed,
        sizes={"val": n_val, "test": n_test, "reference": n_ref, "query": n_query},
    )
