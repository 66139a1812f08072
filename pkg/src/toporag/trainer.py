"""Self-supervised contrastive training of the topology encoder.

Two stochastic views of every graph in a minibatch are encoded with the
shared model; the InfoNCE objective pulls each graph's view pair together
against the in-batch cross-view negatives (anchors are view-1 embeddings
only, no symmetrized term):

    L = -sum_k log( exp(sim(z1_k, z2_k)/tau) / sum_j exp(sim(z1_k, z2_j)/tau) )

Gradients are exact analytic backprop through the similarity matrix, the
L2 normalization, mean pooling, activations, and the A_hat aggregation;
a finite-difference oracle in the test suite pins them down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import (
    EncoderModel,
    Embedding,
    ForwardCache,
    ZERO_NORM_GUARD,
    forward,
    init_model,
)
from .errors import DegenerateBatch, EmptyCorpus, NonPositiveTau, ZeroVector
from .topo import TopologyGraph
from .util import stable_seed


@dataclass(frozen=True)
class AugmentConfig:
    """Independent edge/node drop probabilities for the view sampler."""

    p_edge: float = 0.2
    p_node: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_edge < 1.0 and 0.0 <= self.p_node < 1.0):
            raise ValueError("drop probabilities must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.2
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise NonPositiveTau(f"tau must be positive, got {self.tau}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def augment(graph: TopologyGraph, cfg: AugmentConfig, rng: np.random.Generator) -> TopologyGraph:
    """Sample one stochastic view: drop edges, then nodes, then rebuild.

    Surviving nodes keep their type and config-count features; the degree
    column is recomputed on the surviving edge set so it never leaks
    pre-augmentation structure. If every node would be dropped, one node is
    retained uniformly at random.
    """
    edges = sorted(graph.edges)
    kept_edges = [e for e in edges if rng.random() >= cfg.p_edge]

    kept_nodes = [i for i in range(graph.n_nodes) if rng.random() >= cfg.p_node]
    if not kept_nodes and graph.n_nodes:
        kept_nodes = [int(rng.integers(graph.n_nodes))]

    remap = {old: new for new, old in enumerate(kept_nodes)}
    new_edges = frozenset(
        (remap[u], remap[v]) for u, v in kept_edges if u in remap and v in remap
    )
    features = graph.features[kept_nodes].copy()
    features[:, 2] = 0.0
    for u, v in new_edges:
        features[u, 2] += 1.0
        features[v, 2] += 1.0

    return TopologyGraph(
        case_id=graph.case_id,
        nodes=tuple(graph.nodes[i] for i in kept_nodes),
        edges=new_edges,
        features=features,
    )


def sample_views(
    batch: list[TopologyGraph], aug: AugmentConfig, rng: np.random.Generator
) -> list[tuple[TopologyGraph, TopologyGraph]]:
    """Two independently augmented views per graph, drawn in batch order."""
    return [(augment(g, aug, rng), augment(g, aug, rng)) for g in batch]


def _as_unit_rows(vectors, what: str) -> np.ndarray:
    rows = []
    for v in vectors:
        arr = v.vector if isinstance(v, Embedding) else np.asarray(v, dtype=float)
        norm = np.linalg.norm(arr)
        if norm < ZERO_NORM_GUARD:
            raise ZeroVector(f"{what} contains a zero vector")
        rows.append(arr / norm)
    return np.stack(rows)


def info_nce_loss(z1, z2, tau: float) -> float:
    """Evaluate the contrastive objective on two aligned embedding lists.

    Log-sum-exp terms use max subtraction, so extreme tau values cannot
    overflow.
    """
    if tau <= 0:
        raise NonPositiveTau(f"tau must be positive, got {tau}")
    if len(z1) != len(z2) or len(z1) == 0:
        raise ValueError("view lists must be non-empty and equally sized")
    a = _as_unit_rows(z1, "view 1")
    b = _as_unit_rows(z2, "view 2")
    scores = (a @ b.T) / tau
    row_max = scores.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(scores - row_max).sum(axis=1))
    return float((lse - np.diag(scores)).sum())


@dataclass
class ModelGrads:
    """Gradient accumulator shaped exactly like EncoderModel."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @staticmethod
    def zeros_like(model: EncoderModel) -> "ModelGrads":
        return ModelGrads(
            [np.zeros_like(w) for w in model.weights],
            [np.zeros_like(b) for b in model.biases],
        )


def _backward_view(model: EncoderModel, cache: ForwardCache, dz: np.ndarray, grads: ModelGrads) -> None:
    """Accumulate dL/dtheta for one encoded view given dL/d(embedding)."""
    z = cache.embedding
    n = cache.hs[0].shape[0]
    # through z = pooled / ||pooled||
    dpooled = (dz - (z @ dz) * z) / cache.norm
    delta = np.tile(dpooled / n, (n, 1))  # mean pooling
    for layer in (2, 1, 0):
        if layer < 2:
            delta = delta * (cache.pre[layer + 1] > 0)  # ReLU mask; layer 3 is identity
        grads.weights[layer] += cache.zs[layer + 1].T @ delta
        grads.biases[layer] += delta.sum(axis=0)
        if layer > 0:
            delta = cache.a_hat @ (delta @ model.weights[layer].T)


def batch_loss(model: EncoderModel, views: list[tuple[TopologyGraph, TopologyGraph]], tau: float) -> float:
    """Forward-only loss on fixed views (the finite-difference oracle's hook)."""
    caches1 = [forward(model, v1) for v1, _ in views]
    caches2 = [forward(model, v2) for _, v2 in views]
    _guard_degenerate(caches1 + caches2)
    return info_nce_loss([c.embedding for c in caches1], [c.embedding for c in caches2], tau)


def batch_loss_and_grads(
    model: EncoderModel, views: list[tuple[TopologyGraph, TopologyGraph]], tau: float
) -> tuple[float, ModelGrads]:
    """Loss plus exact analytic gradients for a batch of fixed view pairs."""
    if tau <= 0:
        raise NonPositiveTau(f"tau must be positive, got {tau}")
    caches1 = [forward(model, v1) for v1, _ in views]
    caches2 = [forward(model, v2) for _, v2 in views]
    _guard_degenerate(caches1 + caches2)

    z1 = np.stack([c.embedding for c in caches1])
    z2 = np.stack([c.embedding for c in caches2])
    scores = (z1 @ z2.T) / tau
    row_max = scores.max(axis=1, keepdims=True)
    exp = np.exp(scores - row_max)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(exp.sum(axis=1))
    loss = float((lse - np.diag(scores)).sum())

    dscores = (softmax - np.eye(len(views))) / tau
    dz1 = dscores @ z2
    dz2 = dscores.T @ z1

    grads = ModelGrads.zeros_like(model)
    for k in range(len(views)):
        _backward_view(model, caches1[k], dz1[k], grads)
        _backward_view(model, caches2[k], dz2[k], grads)
    return loss, grads


def _guard_degenerate(caches: list[ForwardCache]) -> None:
    if any(c.norm < ZERO_NORM_GUARD for c in caches):
        raise DegenerateBatch("a view embedding hit the zero-norm guard; gradients undefined")


def loss_gradients(
    model: EncoderModel,
    batch: list[TopologyGraph],
    aug: AugmentConfig,
    train: TrainConfig,
    rng: np.random.Generator,
) -> tuple[float, ModelGrads]:
    """Sample two views per graph and return (loss, analytic gradients)."""
    if len(batch) < 2:
        raise ValueError("contrastive batches need at least two graphs")
    views = sample_views(batch, aug, rng)
    return batch_loss_and_grads(model, views, train.tau)


class _Adam:
    """Adam moments over the (weights, biases) parameter list."""

    def __init__(self, model: EncoderModel, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        params = model.weights + model.biases
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, model: EncoderModel, grads: ModelGrads) -> None:
        self.t += 1
        params = model.weights + model.biases
        gs = grads.weights + grads.biases
        for i, (p, g) in enumerate(zip(params, gs)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _epoch_batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        if len(chunk) >= 2:  # a single leftover graph has no negatives
            yield chunk


def _corpus_loss(model: EncoderModel, graphs: list[TopologyGraph], aug: AugmentConfig, cfg: TrainConfig, seed: int) -> float:
    """Mean per-anchor loss over fixed-seed views; used for val tracking."""
    rng = np.random.default_rng(seed)
    views = sample_views(graphs, aug, rng)
    total, count = 0.0, 0
    for start in range(0, len(views), cfg.batch_size):
        chunk = views[start : start + cfg.batch_size]
        if len(chunk) < 2:
            continue
        total += batch_loss(model, chunk, cfg.tau)
        count += len(chunk)
    return total / count if count else 0.0


def train(
    corpus_train: list[TopologyGraph],
    corpus_val: list[TopologyGraph],
    aug: AugmentConfig,
    cfg: TrainConfig,
    on_epoch=None,
) -> EncoderModel:
    """Run the full contrastive training loop and return the best model.

    Deterministic given cfg.seed: initialization, shuffling, augmentation
    draws, and Adam updates all derive from it. Early stopping keeps the
    model with the lowest validation loss (training loss when no validation
    graphs are supplied), waiting cfg.patience epochs for an improvement.
    """
    if len(corpus_train) < cfg.batch_size:
        raise EmptyCorpus(
            f"need at least batch_size={cfg.batch_size} training graphs, got {len(corpus_train)}"
        )
    model = init_model(cfg.seed)
    if cfg.max_epochs == 0:
        return model

    rng = np.random.default_rng(stable_seed(cfg.seed, "train-loop"))
    optimizer = _Adam(model, cfg.learning_rate)
    best_model = model.copy()
    best_val = np.inf
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(corpus_train))
        epoch_loss, seen = 0.0, 0
        for chunk in _epoch_batches(order, cfg.batch_size):
            batch = [corpus_train[i] for i in chunk]
            loss, grads = loss_gradients(model, batch, aug, cfg, rng)
            optimizer.step(model, grads)
            epoch_loss += loss
            seen += len(batch)
        train_loss = epoch_loss / seen if seen else 0.0

        if corpus_val:
            val_loss = _corpus_loss(model, corpus_val, aug, cfg, stable_seed(cfg.seed, "val", epoch))
        else:
            val_loss = train_loss
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})

        if val_loss < best_val:
            best_val = val_loss
            best_model = model.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best_model
