"""Base classifiers with the isolated-node-independence property.

Two architectures are provided: a two-layer message-passing network (row
normalized mean aggregation with self-loops, relu in between) and an
adjacency-blind feature MLP. Both are trained with a momentum-free
per-parameter scaled gradient step (Adagrad) implemented directly in numpy,
which keeps training bit-deterministic for a fixed seed.

A deleted or isolated node has no incident edges, so its normalized row
reduces to the self-loop and its prediction depends on its own features only;
appending isolated nodes can never change predictions on existing nodes. That
independence is what makes the vote certificates sound for these models and
is covered by an exact test.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .graph import DataSplit, Graph
from .sampling import SmoothedSample, SmoothingParams, derive_sample_seed, sample_smoothed_graph

KINDS = ("message_passing_2layer", "feature_mlp")

_INIT_STREAM = 1 << 40
_TRAIN_STREAM = (1 << 40) + 1
_ADAGRAD_EPS = 1e-10


@dataclass(frozen=True)
class ClassifierSpec:
    """Architecture and optimization settings for a base classifier."""

    kind: str = "message_passing_2layer"
    hidden_dim: int = 64
    epochs: int = 200
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True, eq=False)
class TrainedModel:
    spec: ClassifierSpec
    weights: dict  # w1, b1, w2, b2
    num_classes: int
    num_features: int
    graph_fingerprint: str


def _normalized_adjacency(graph: Graph) -> sp.csr_matrix:
    """Row-normalized adjacency with a self-loop on every node."""
    n = graph.n
    e = graph.edges
    src = np.concatenate([e[:, 0], e[:, 1], np.arange(n, dtype=np.int64)])
    dst = np.concatenate([e[:, 1], e[:, 0], np.arange(n, dtype=np.int64)])
    a = sp.csr_matrix((np.ones(src.shape[0]), (src, dst)), shape=(n, n))
    inv_deg = 1.0 / np.asarray(a.sum(axis=1)).ravel()
    return sp.diags(inv_deg) @ a


def _init_weights(spec: ClassifierSpec, num_features: int, num_classes: int) -> dict:
    rng = np.random.default_rng(derive_sample_seed(spec.seed, _INIT_STREAM))

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    return {
        "w1": glorot(num_features, spec.hidden_dim),
        "b1": np.zeros(spec.hidden_dim),
        "w2": glorot(spec.hidden_dim, num_classes),
        "b2": np.zeros(num_classes),
    }


def _forward(weights: dict, agg: Optional[sp.csr_matrix], features: np.ndarray,
             transformed: Optional[np.ndarray] = None):
    """Forward pass; ``agg`` is None for the MLP.

    Features are transformed before aggregation (same map by associativity),
    so the ``features @ w1`` product can be cached across smoothing samples.
    """
    t1 = features @ weights["w1"] if transformed is None else transformed
    z1 = (agg @ t1 if agg is not None else t1) + weights["b1"]
    h1 = np.maximum(z1, 0.0)
    t2 = h1 @ weights["w2"]
    logits = (agg @ t2 if agg is not None else t2) + weights["b2"]
    return z1, h1, logits


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _gradients(weights, agg, features, labels, train_idx, weight_decay):
    z1, h1, logits = _forward(weights, agg, features)
    probs = _softmax(logits)
    d_logits = np.zeros_like(probs)
    d_logits[train_idx] = probs[train_idx]
    d_logits[train_idx, labels[train_idx]] -= 1.0
    d_logits /= len(train_idx)

    d_t2 = agg.T @ d_logits if agg is not None else d_logits
    g_w2 = h1.T @ d_t2 + weight_decay * weights["w2"]
    g_b2 = d_logits.sum(axis=0)
    d_h1 = d_t2 @ weights["w2"].T
    d_z1 = d_h1 * (z1 > 0.0)
    d_t1 = agg.T @ d_z1 if agg is not None else d_z1
    g_w1 = features.T @ d_t1 + weight_decay * weights["w1"]
    g_b1 = d_z1.sum(axis=0)
    return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}


def _adagrad_step(weights, grads, cache, learning_rate):
    for key, grad in grads.items():
        cache[key] += grad * grad
        weights[key] -= learning_rate * grad / (np.sqrt(cache[key]) + _ADAGRAD_EPS)


def _check_train_nodes(graph: Graph, train_idx: np.ndarray) -> None:
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    if np.any(graph.labels[train_idx] < 0):
        raise ValueError("every training node must carry a label")


def train_with_noise(spec: ClassifierSpec, graph: Graph, split: DataSplit,
                     params: SmoothingParams) -> TrainedModel:
    """Train a base classifier with smoothing noise augmentation.

    Each epoch draws a fresh smoothed sample (seeded from ``spec.seed`` and
    the epoch index) and takes one optimization step of the cross-entropy over
    the training nodes on it. Deterministic given the seeds.
    """
    train_idx = np.asarray(split.train, dtype=np.int64)
    _check_train_nodes(graph, train_idx)
    num_classes = graph.num_classes
    if num_classes < 2:
        raise ValueError("training requires at least 2 classes")

    weights = _init_weights(spec, graph.num_features, num_classes)
    cache = {k: np.zeros_like(v) for k, v in weights.items()}
    for epoch in range(spec.epochs):
        sample = sample_smoothed_graph(graph, params,
                                       derive_sample_seed(spec.seed, epoch))
        agg = (_normalized_adjacency(sample.graph)
               if spec.kind == "message_passing_2layer" else None)
        grads = _gradients(weights, agg, graph.features, graph.labels,
                           train_idx, spec.weight_decay)
        _adagrad_step(weights, grads, cache, spec.learning_rate)

    return TrainedModel(spec=spec, weights=weights, num_classes=num_classes,
                        num_features=graph.num_features,
                        graph_fingerprint=graph.fingerprint())


def feature_transform(model: TrainedModel, features: np.ndarray) -> np.ndarray:
    """First-layer feature product, cacheable across smoothing samples."""
    if features.shape[1] != model.num_features:
        raise ValueError(
            f"feature dimension {features.shape[1]} does not match "
            f"the trained model ({model.num_features})")
    return features @ model.weights["w1"]


def predict(model: TrainedModel, graph: Graph,
            transformed: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-node class predictions (argmax, ties to the lower class id).

    ``transformed`` may carry a cached :func:`feature_transform` result when
    many graphs share the same feature matrix.
    """
    if graph.num_features != model.num_features:
        raise ValueError(
            f"feature dimension {graph.num_features} does not match "
            f"the trained model ({model.num_features})")
    agg = (_normalized_adjacency(graph)
           if model.spec.kind == "message_passing_2layer" else None)
    logits = _forward(model.weights, agg, graph.features, transformed)[-1]
    return np.argmax(logits, axis=1)


def train_predict_end_to_end(spec: ClassifierSpec, sample: SmoothedSample,
                             split: DataSplit,
                             mode: str = "include") -> tuple[np.ndarray, np.ndarray]:
    """Train on one smoothed sample and predict on it (no extra noise).

    Nodes isolated in the sample are bypassed by the training loss. In
    exclude mode every zero-degree node is marked abstaining; in include mode
    all nodes receive predictions. If every training node is isolated,
    exclude mode returns an all-abstain result while include mode refuses to
    train on nothing.

    Returns
    -------
    (predictions, abstain_mask)
        Class ids of shape (n,) and a boolean abstention mask; predictions at
        abstaining positions are meaningless placeholders.
    """
    if mode not in ("include", "exclude"):
        raise ValueError("mode must be 'include' or 'exclude'")
    graph = sample.graph
    degrees = graph.degrees
    isolated = degrees == 0

    train_idx = np.asarray(split.train, dtype=np.int64)
    _check_train_nodes(graph, train_idx)
    train_idx = train_idx[~isolated[train_idx]]
    if train_idx.size == 0:
        if mode == "exclude":
            return (np.zeros(graph.n, dtype=np.int64),
                    np.ones(graph.n, dtype=bool))
        raise ValueError("every training node is isolated in this sample")

    num_classes = graph.num_classes
    if num_classes < 2:
        raise ValueError("training requires at least 2 classes")
    weights = _init_weights(spec, graph.num_features, num_classes)
    cache = {k: np.zeros_like(v) for k, v in weights.items()}
    agg = (_normalized_adjacency(graph)
           if spec.kind == "message_passing_2layer" else None)
    for _ in range(spec.epochs):
        grads = _gradients(weights, agg, graph.features, graph.labels,
                           train_idx, spec.weight_decay)
        _adagrad_step(weights, grads, cache, spec.learning_rate)

    logits = _forward(weights, agg, graph.features)[-1]
    preds = np.argmax(logits, axis=1)
    abstain = isolated.copy() if mode == "exclude" else np.zeros(graph.n, dtype=bool)
    return preds, abstain


def save_model(model: TrainedModel, path) -> None:
    """Dump a trained model to the flat binary container format.

    Layout: magic ``SCM1``, a length-prefixed UTF-8 JSON header (spec fields,
    class/feature counts, fingerprint), then for each of w1, b1, w2, b2 a
    uint32 ndim, uint64 dims, and row-major float64 data.
    """
    import json

    header = json.dumps({
        "kind": model.spec.kind,
        "hidden_dim": model.spec.hidden_dim,
        "epochs": model.spec.epochs,
        "learning_rate": model.spec.learning_rate,
        "weight_decay": model.spec.weight_decay,
        "seed": model.spec.seed,
        "num_classes": model.num_classes,
        "num_features": model.num_features,
        "graph_fingerprint": model.graph_fingerprint,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(b"SCM1")
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for key in ("w1", "b1", "w2", "b2"):
            arr = np.ascontiguousarray(model.weights[key], dtype=np.float64)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_model(path) -> TrainedModel:
    """Load a model written by :func:`save_model`."""
    import json

    with open(path, "rb") as fh:
        if fh.read(4) != b"SCM1":
            raise ValueError("not a model container")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        weights = {}
        for key in ("w1", "b1", "w2", "b2"):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            count = int(np.prod(shape)) if shape else 1
            weights[key] = np.frombuffer(
                fh.read(8 * count), dtype=np.float64).reshape(shape).copy()
    spec = ClassifierSpec(kind=header["kind"], hidden_dim=header["hidden_dim"],
                          epochs=header["epochs"],
                          learning_rate=header["learning_rate"],
                          weight_decay=header["weight_decay"], seed=header["seed"])
    return TrainedModel(spec=spec, weights=weights,
                        num_classes=header["num_classes"],
                        num_features=header["num_features"],
                        graph_fingerprint=header["graph_fingerprint"])
