"""Three-layer graph-convolutional encoder producing unit-norm embeddings.

Forward pass, per layer l: H^l = act(A_hat @ H^(l-1) @ W_l + b_l), where
A_hat is the symmetrically normalized adjacency with self-loops,
A_hat = D^(-1/2) (A + I) D^(-1/2). Activations are ReLU, ReLU, identity.
The graph embedding is the mean over node rows of H^3, L2-normalized.

A pre-normalization norm below 1e-12 yields the all-zero embedding instead
of a division by ~0; cosine_sim rejects zero vectors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyGraph, MalformedJson, ZeroVector
from .topo import NUM_FEATURES, TopologyGraph

EMBED_DIM = 32
LAYER_DIMS = ((NUM_FEATURES, EMBED_DIM), (EMBED_DIM, EMBED_DIM), (EMBED_DIM, EMBED_DIM))
ZERO_NORM_GUARD = 1e-12
MODEL_FORMAT_VERSION = 1


@dataclass
class EncoderModel:
    """Weights and biases of the three GCN layers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ValueError("encoder has exactly three layers")
        for i, ((rows, cols), w, b) in enumerate(zip(LAYER_DIMS, self.weights, self.biases)):
            w = np.asarray(w, dtype=float)
            b = np.asarray(b, dtype=float)
            if w.shape != (rows, cols):
                raise ValueError(f"layer {i + 1} weight shape {w.shape}, expected {(rows, cols)}")
            if b.shape != (cols,):
                raise ValueError(f"layer {i + 1} bias shape {b.shape}, expected {(cols,)}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i + 1} contains non-finite entries")
            self.weights[i] = w
            self.biases[i] = b

    @property
    def d(self) -> int:
        return EMBED_DIM

    def copy(self) -> "EncoderModel":
        return EncoderModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_json(self) -> str:
        payload = {
            "format_version": MODEL_FORMAT_VERSION,
            "dims": {"in": NUM_FEATURES, "hidden": EMBED_DIM, "out": EMBED_DIM},
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "EncoderModel":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedJson(f"invalid model JSON: {exc}") from exc
        if raw.get("format_version") != MODEL_FORMAT_VERSION:
            raise MalformedJson(f"unsupported model format_version: {raw.get('format_version')!r}")
        return EncoderModel(
            [np.asarray(w, dtype=float) for w in raw["weights"]],
            [np.asarray(b, dtype=float) for b in raw["biases"]],
        )

    def fingerprint(self) -> str:
        """Content hash of the canonical serialization (equals the file hash)."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    case_id: str

    @property
    def is_zero(self) -> bool:
        return not self.vector.any()


def init_model(seed: int) -> EncoderModel:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in LAYER_DIMS:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EncoderModel(weights, biases)


def save_model(model: EncoderModel, path: str | Path) -> None:
    Path(path).write_text(model.to_json(), encoding="utf-8")


def load_model(path: str | Path) -> EncoderModel:
    return EncoderModel.from_json(Path(path).read_text(encoding="utf-8"))


def normalized_adjacency(graph: TopologyGraph) -> np.ndarray:
    """A_hat = D^(-1/2) (A + I) D^(-1/2) over the simple edge set."""
    n = graph.n_nodes
    a = np.eye(n)
    for u, v in graph.edges:
        a[u, v] = 1.0
        a[v, u] = 1.0
    inv_sqrt_deg = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]


@dataclass
class ForwardCache:
    """Intermediate activations kept for backpropagation.

    zs[l] = A_hat @ H^(l-1)           (aggregated input to layer l)
    pre[l] = zs[l] @ W_l + b_l        (pre-activation)
    hs[l] = activation(pre[l]), hs[0] = X
    pooled = mean over node rows of hs[3]; norm = ||pooled||.
    """

    a_hat: np.ndarray
    hs: list[np.ndarray]
    zs: list[np.ndarray]
    pre: list[np.ndarray]
    pooled: np.ndarray
    norm: float
    embedding: np.ndarray


def forward(model: EncoderModel, graph: TopologyGraph) -> ForwardCache:
    if graph.n_nodes == 0:
        raise EmptyGraph(f"cannot encode empty graph {graph.case_id!r}")
    a_hat = normalized_adjacency(graph)
    hs = [graph.features.astype(float)]
    zs: list[np.ndarray] = [np.empty(0)]  # 1-indexed by layer
    pre: list[np.ndarray] = [np.empty(0)]
    for layer in range(3):
        z = a_hat @ hs[-1]
        p = z @ model.weights[layer] + model.biases[layer]
        h = np.maximum(p, 0.0) if layer < 2 else p
        zs.append(z)
        pre.append(p)
        hs.append(h)
    pooled = hs[-1].mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    embedding = pooled / norm if norm >= ZERO_NORM_GUARD else np.zeros_like(pooled)
    return ForwardCache(a_hat=a_hat, hs=hs, zs=zs, pre=pre, pooled=pooled, norm=norm, embedding=embedding)


def encode(model: EncoderModel, graph: TopologyGraph) -> Embedding:
    """Encode one graph into a unit-norm (or zero-guarded) embedding."""
    return Embedding(vector=forward(model, graph).embedding, case_id=graph.case_id)


def cosine_sim(a: Embedding | np.ndarray, b: Embedding | np.ndarray) -> float:
    va = a.vector if isinstance(a, Embedding) else np.asarray(a, dtype=float)
    vb = b.vector if isinstance(b, Embedding) else np.asarray(b, dtype=float)
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na < ZERO_NORM_GUARD or nb < ZERO_NORM_GUARD:
        raise ZeroVector("cosine similarity undefined for zero vectors")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))
