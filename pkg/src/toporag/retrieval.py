"""Reference embedding index, cosine nearest-neighbour lookup, and
assembly of the four-part grounding context (target topology, reference
topology, reference driver, background knowledge).

The index is an exact brute-force scan; reference pools are small (tens of
cases), so there is nothing to gain from an ANN structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderModel, Embedding, cosine_sim, encode
from .errors import (
    EmptyIndex,
    EncodeFailure,
    FingerprintMismatch,
    MalformedJson,
    MissingDriver,
    MissingKnowledgeFile,
    ParseFailure,
    ToporagError,
    UnknownReference,
)
from .topo import TopologyGraph, build_graph, parse_topology

INDEX_FORMAT_VERSION = 1


@dataclass(frozen=True)
class IndexEntry:
    case_id: str
    embedding: np.ndarray
    topology_path: str
    driver_path: str


@dataclass(frozen=True)
class ReferenceIndex:
    entries: tuple[IndexEntry, ...]
    model_fingerprint: str

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, case_id: str) -> IndexEntry:
        for entry in self.entries:
            if entry.case_id == case_id:
                return entry
        raise UnknownReference(f"case {case_id!r} is not in the index")

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": INDEX_FORMAT_VERSION,
                "model_fingerprint": self.model_fingerprint,
                "entries": [
                    {
                        "case_id": e.case_id,
                        "embedding": e.embedding.tolist(),
                        "topology_path": e.topology_path,
                        "driver_path": e.driver_path,
                    }
                    for e in self.entries
                ],
            },
            sort_keys=True,
            indent=2,
        ) + "\n"

    @staticmethod
    def from_json(text: str) -> "ReferenceIndex":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedJson(f"invalid index JSON: {exc}") from exc
        if raw.get("format_version") != INDEX_FORMAT_VERSION:
            raise MalformedJson(f"unsupported index format_version: {raw.get('format_version')!r}")
        entries = tuple(
            IndexEntry(
                case_id=e["case_id"],
                embedding=np.asarray(e["embedding"], dtype=float),
                topology_path=e["topology_path"],
                driver_path=e["driver_path"],
            )
            for e in raw["entries"]
        )
        return ReferenceIndex(entries=entries, model_fingerprint=raw["model_fingerprint"])


@dataclass(frozen=True)
class TopoRagContext:
    """The grounding bundle handed to every agent call for one case.

    In the retrieval-disabled ablation the reference parts are empty
    strings and similarity is 0; properly assembled contexts always carry
    four non-empty parts.
    """

    target_topology: str
    reference_topology: str
    reference_driver: str
    background_knowledge: str
    similarity: float
    reference_id: str

    @property
    def has_reference(self) -> bool:
        return bool(self.reference_id)


def build_index(model: EncoderModel, reference_cases: list[dict]) -> ReferenceIndex:
    """Embed every reference case and record the encoder fingerprint.

    Each case dict carries ``topology_path`` and ``driver_path``. Entries
    are sorted by case_id so the serialized index is byte-stable.
    """
    entries = []
    for case in reference_cases:
        topo_path = Path(case["topology_path"])
        driver_path = Path(case["driver_path"])
        try:
            doc = parse_topology(topo_path.read_text(encoding="utf-8"))
        except (OSError, ToporagError) as exc:
            raise ParseFailure(str(topo_path), str(exc)) from exc
        if not driver_path.is_file():
            raise MissingDriver(doc.case_id, str(driver_path))
        try:
            emb = encode(model, build_graph(doc))
        except ToporagError as exc:
            raise EncodeFailure(doc.case_id, str(exc)) from exc
        if emb.is_zero:
            raise EncodeFailure(doc.case_id, "embedding hit the zero-norm guard")
        entries.append(
            IndexEntry(
                case_id=doc.case_id,
                embedding=emb.vector,
                topology_path=str(topo_path),
                driver_path=str(driver_path),
            )
        )
    entries.sort(key=lambda e: e.case_id)
    return ReferenceIndex(entries=tuple(entries), model_fingerprint=model.fingerprint())


def retrieve(
    index: ReferenceIndex, query: TopologyGraph, model: EncoderModel, k: int
) -> list[tuple[str, float]]:
    """Top-k reference cases by cosine similarity to the query graph.

    Ties break toward the lexicographically smaller case_id, so rankings
    are total and reproducible.
    """
    if len(index) == 0:
        raise EmptyIndex("reference index has no entries")
    if k < 1:
        raise ValueError("k must be at least 1")
    if index.model_fingerprint != model.fingerprint():
        raise FingerprintMismatch(
            "index was built with a different encoder; rebuild it before retrieving"
        )
    query_emb = encode(model, query)
    scored = [
        (entry.case_id, cosine_sim(query_emb, Embedding(entry.embedding, entry.case_id)))
        for entry in index.entries
    ]
    scored.sort(key=lambda cs: (-cs[1], cs[0]))
    return scored[:k]


def assemble_context(
    index: ReferenceIndex,
    query_topology_text: str,
    best: tuple[str, float],
    knowledge_path: str | Path,
) -> TopoRagContext:
    """Load the retrieved reference verbatim and bundle the four parts."""
    case_id, similarity = best
    entry = index.get(case_id)
    knowledge_path = Path(knowledge_path)
    if not knowledge_path.is_file():
        raise MissingKnowledgeFile(f"background knowledge file not found: {knowledge_path}")
    context = TopoRagContext(
        target_topology=query_topology_text,
        reference_topology=Path(entry.topology_path).read_text(encoding="utf-8"),
        reference_driver=Path(entry.driver_path).read_text(encoding="utf-8"),
        background_knowledge=knowledge_path.read_text(encoding="utf-8"),
        similarity=float(similarity),
        reference_id=case_id,
    )
    parts = {
        "target topology": context.target_topology,
        "reference topology": context.reference_topology,
        "reference driver": context.reference_driver,
        "background knowledge": context.background_knowledge,
    }
    empty = [name for name, text in parts.items() if not text.strip()]
    if empty:
        raise ToporagError(f"assembled context has empty parts: {', '.join(empty)}")
    if not -1.0 <= context.similarity <= 1.0:
        raise ToporagError(f"similarity {context.similarity} outside [-1, 1]")
    return context


def assemble_no_rag_context(query_topology_text: str, knowledge_path: str | Path) -> TopoRagContext:
    """Ablation context: target topology and background knowledge only."""
    knowledge_path = Path(knowledge_path)
    if not knowledge_path.is_file():
        raise MissingKnowledgeFile(f"background knowledge file not found: {knowledge_path}")
    return TopoRagContext(
        target_topology=query_topology_text,
        reference_topology="",
        reference_driver="",
        background_knowledge=knowledge_path.read_text(encoding="utf-8"),
        similarity=0.0,
        reference_id="",
    )


def save_index(index: ReferenceIndex, path: str | Path) -> None:
    Path(path).write_text(index.to_json(), encoding="utf-8")


def load_index(path: str | Path) -> ReferenceIndex:
    return ReferenceIndex.from_json(Path(path).read_text(encoding="utf-8"))
