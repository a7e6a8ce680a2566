"""GCN / GAT graph classifiers with mean-pool readout, built on :mod:`autodiff`."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .graphs import Graph
from .seeding import stream

GCN_SLOPE = 0.01
ATTENTION_SLOPE = 0.2


@dataclass(frozen=True)
class Architecture:
    kind: str  # "gcn" | "gat"
    in_dim: int
    hidden: tuple[int, ...] = (16, 16)
    num_classes: int = 2

    def __post_init__(self):
        if self.kind not in ("gcn", "gat"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if not self.hidden:
            raise ValueError("need at least one message-passing layer")

    @property
    def embedding_dim(self) -> int:
        return self.hidden[-1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "hidden": list(self.hidden),
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["kind"], int(d["in_dim"]), tuple(int(h) for h in d["hidden"]), int(d["num_classes"]))


@dataclass
class GnnParams:
    arch: Architecture
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "GnnParams":
        return GnnParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def from_flat(self, vec: np.ndarray) -> "GnnParams":
        out, pos = {}, 0
        for k, v in self.tensors.items():
            out[k] = np.asarray(vec[pos:pos + v.size], dtype=np.float64).reshape(v.shape).copy()
            pos += v.size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, parameters need {pos}")
        return GnnParams(self.arch, out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k, v in self.tensors.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(arch: Architecture, seed: int) -> GnnParams:
    rng = stream(seed, "gnn-init")
    t: dict[str, np.ndarray] = {}
    widths = (arch.in_dim, *arch.hidden)
    for i in range(len(arch.hidden)):
        t[f"W{i}"] = _glorot(rng, widths[i], widths[i + 1])
        t[f"b{i}"] = np.zeros((1, widths[i + 1]))
        if arch.kind == "gat":
            t[f"att_src{i}"] = _glorot(rng, widths[i + 1], 1)
            t[f"att_dst{i}"] = _glorot(rng, widths[i + 1], 1)
    t["Wc"] = _glorot(rng, arch.embedding_dim, arch.num_classes)
    t["bc"] = np.zeros((1, arch.num_classes))
    return GnnParams(arch, t)


# ---------------------------------------------------------------- batching

def _message_structure(graph: Graph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Message edges ``src -> dst`` with self-loops and GCN coefficients.

    Undirected edges carry messages both ways; directed edges only forward.
    GCN coefficient is ``1/sqrt(deg(src) deg(dst))`` with in-degree counting
    the self-loop, i.e. the symmetric normalization for undirected graphs.
    """
    cached = graph._cache.get("msg")
    if cached is not None:
        return cached
    n = graph.num_nodes
    e = graph.edges
    loops = np.arange(n, dtype=np.int64)
    if graph.directed:
        src = np.concatenate([e[:, 0], loops])
        dst = np.concatenate([e[:, 1], loops])
    else:
        src = np.concatenate([e[:, 0], e[:, 1], loops])
        dst = np.concatenate([e[:, 1], e[:, 0], loops])
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    coef = (1.0 / np.sqrt(deg[src] * deg[dst])).reshape(-1, 1)
    graph._cache["msg"] = (src, dst, coef)
    return src, dst, coef


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of graphs, ready for message passing."""

    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    coef: np.ndarray
    node_graph: np.ndarray
    inv_counts: np.ndarray
    labels: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_graphs(self) -> int:
        return self.inv_counts.shape[0]

    @classmethod
    def of(cls, graphs: Sequence[Graph]) -> "GraphBatch":
        if not graphs:
            raise ValueError("cannot batch zero graphs")
        if len(graphs) == 1:
            g = graphs[0]
            src, dst, coef = _message_structure(g)
            return cls(g.features, src, dst, coef, np.zeros(g.num_nodes, dtype=np.int64),
                       np.array([[1.0 / g.num_nodes]]), np.array([g.label], dtype=np.int64))
        xs, srcs, dsts, coefs, owners = [], [], [], [], []
        base = 0
        for i, g in enumerate(graphs):
            src, dst, coef = _message_structure(g)
            xs.append(g.features)
            srcs.append(src + base)
            dsts.append(dst + base)
            coefs.append(coef)
            owners.append(np.full(g.num_nodes, i, dtype=np.int64))
            base += g.num_nodes
        counts = np.array([g.num_nodes for g in graphs], dtype=np.float64)
        return cls(np.concatenate(xs), np.concatenate(srcs), np.concatenate(dsts),
                   np.concatenate(coefs), np.concatenate(owners), (1.0 / counts).reshape(-1, 1),
                   np.array([g.label for g in graphs], dtype=np.int64))


# ---------------------------------------------------------------- forward

def as_tensors(params: GnnParams, requires_grad: bool = False) -> dict[str, ad.Tensor]:
    if requires_grad:
        return {k: ad.parameter(v) for k, v in params.tensors.items()}
    return {k: ad.constant(v) for k, v in params.tensors.items()}


def _gat_attention(t: dict, i: int, z: ad.Tensor, batch: GraphBatch) -> ad.Tensor:
    s_src = ad.matmul(z, t[f"att_src{i}"])
    s_dst = ad.matmul(z, t[f"att_dst{i}"])
    scores = ad.leaky_relu(ad.add(ad.gather_rows(s_src, batch.src), ad.gather_rows(s_dst, batch.dst)),
                           ATTENTION_SLOPE)
    return ad.segment_softmax(scores, batch.dst, batch.num_nodes)


def node_states(arch: Architecture, t: dict, batch: GraphBatch, x: ad.Tensor) -> ad.Tensor:
    h = x
    for i in range(len(arch.hidden)):
        z = ad.matmul(h, t[f"W{i}"])
        if arch.kind == "gcn":
            weight = ad.constant(batch.coef)
        else:
            weight = _gat_attention(t, i, z, batch)
        msg = ad.mul(ad.gather_rows(z, batch.src), weight)
        agg = ad.scatter_add_rows(msg, batch.dst, batch.num_nodes)
        h = ad.leaky_relu(ad.add(agg, t[f"b{i}"]), GCN_SLOPE)
    return h


def embed_tensor(arch: Architecture, t: dict, batch: GraphBatch, x: ad.Tensor | None = None) -> ad.Tensor:
    x = ad.constant(batch.x) if x is None else x
    if x.shape[1] != arch.in_dim:
        raise ad.ShapeError(f"graph feature dim {x.shape[1]} does not match model input {arch.in_dim}")
    h = node_states(arch, t, batch, x)
    pooled = ad.scatter_add_rows(h, batch.node_graph, batch.num_graphs)
    return ad.mul(pooled, ad.constant(batch.inv_counts))


def classify_tensor(t: dict, embedding: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(embedding, t["Wc"]), t["bc"])


def forward(params: GnnParams, graph: Graph | GraphBatch) -> tuple[np.ndarray, np.ndarray]:
    """``(embeddings, logits)`` as arrays, one row per graph."""
    batch = graph if isinstance(graph, GraphBatch) else GraphBatch.of([graph])
    t = as_tensors(params)
    emb = embed_tensor(params.arch, t, batch)
    return emb.value, classify_tensor(t, emb).value


def encode(params: GnnParams, graph: Graph | GraphBatch) -> np.ndarray:
    batch = graph if isinstance(graph, GraphBatch) else GraphBatch.of([graph])
    return embed_tensor(params.arch, as_tensors(params), batch).value


def classify(params: GnnParams, embeddings: np.ndarray) -> np.ndarray:
    return embeddings @ params.tensors["Wc"] + params.tensors["bc"]


def gat_attention(params: GnnParams, graph: Graph, layer: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Attention coefficients ``(src, dst, alpha)`` of one GAT layer."""
    if params.arch.kind != "gat":
        raise ValueError("attention is only defined for GAT models")
    batch = GraphBatch.of([graph])
    t = as_tensors(params)
    h = ad.constant(batch.x)
    for i in range(layer):
        z = ad.matmul(h, t[f"W{i}"])
        msg = ad.mul(ad.gather_rows(z, batch.src), _gat_attention(t, i, z, batch))
        h = ad.leaky_relu(ad.add(ad.scatter_add_rows(msg, batch.dst, batch.num_nodes), t[f"b{i}"]), GCN_SLOPE)
    z = ad.matmul(h, t[f"W{layer}"])
    return batch.src, batch.dst, _gat_attention(t, layer, z, batch).value[:, 0]


def predict(params: GnnParams, graphs: Sequence[Graph], chunk: int = 256) -> np.ndarray:
    preds = []
    for i in range(0, len(graphs), chunk):
        _, logits = forward(params, GraphBatch.of(graphs[i:i + chunk]))
        preds.append(np.argmax(logits, axis=1))  # first maximum wins ties
    return np.concatenate(preds)


def evaluate_accuracy(params: GnnParams, graphs: Sequence[Graph]) -> float:
    if not graphs:
        raise ValueError("cannot evaluate accuracy on zero graphs")
    labels = np.array([g.label for g in graphs])
    return float(np.mean(predict(params, graphs) == labels))


# ---------------------------------------------------------------- training

def loss_tensor(params_t: dict, arch: Architecture, batch: GraphBatch) -> ad.Tensor:
    emb = embed_tensor(arch, params_t, batch)
    return ad.cross_entropy(classify_tensor(params_t, emb), batch.labels)


def train_local(params: GnnParams, graphs: Sequence[Graph], epochs: int, learning_rate: float,
                seed: int, batch_size: int = 32, loss_log: list | None = None) -> GnnParams:
    """Minibatch SGD on cross-entropy; returns new parameters.

    Shuffling is driven by ``seed`` so identical calls give identical results.
    ``loss_log`` receives the mean minibatch loss of every epoch.
    """
    if not graphs:
        raise ValueError("train_local needs at least one graph")
    current = params.copy()
    if epochs <= 0:
        return current
    rng = stream(seed, "train-local")
    t = as_tensors(current, requires_grad=True)
    plist = list(t.values())
    for _ in range(epochs):
        order = rng.permutation(len(graphs))
        losses = []
        for start in range(0, len(graphs), batch_size):
            batch = GraphBatch.of([graphs[i] for i in order[start:start + batch_size]])
            loss = loss_tensor(t, current.arch, batch)
            ad.backward(loss)
            ad.sgd_step(plist, learning_rate)
            losses.append(loss.item())
        if loss_log is not None:
            loss_log.append(float(np.mean(losses)))
    out = GnnParams(current.arch, {k: v.value.copy() for k, v in t.items()})
    if not out.is_finite():
        raise FloatingPointError("non-finite parameters after local training")
    return out


def dataset_loss(params: GnnParams, graphs: Sequence[Graph]) -> float:
    batch = GraphBatch.of(list(graphs))
    return loss_tensor(as_tensors(params), params.arch, batch).item()


# ---------------------------------------------------------------- checkpoints

RECORD_MAGIC = "graphshift-record"
RECORD_VERSION = 1


def write_record(path, descriptor: dict, tensors: dict[str, np.ndarray]) -> Path:
    """Text record: header, JSON descriptor, then row-major tensor dumps.

    Floats are written with ``repr`` so a read-back is bit-exact.
    """
    path = Path(path)
    lines = [f"{RECORD_MAGIC} {RECORD_VERSION}", "descriptor " + json.dumps(descriptor, sort_keys=True)]
    for name, arr in tensors.items():
        arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        lines.append(f"tensor {name} {arr.shape[0]} {arr.shape[1]}")
        lines.extend(" ".join(repr(float(x)) for x in row) for row in arr)
    lines.append("end")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_record(path) -> tuple[dict, dict[str, np.ndarray]]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != RECORD_MAGIC:
        raise ValueError(f"{path}: not a {RECORD_MAGIC} file")
    if int(head[1]) != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported record version {head[1]}")
    if not lines[1].startswith("descriptor "):
        raise ValueError(f"{path}:2: missing descriptor line")
    descriptor = json.loads(lines[1][len("descriptor "):])
    tensors: dict[str, np.ndarray] = {}
    i = 2
    while lines[i] != "end":
        _, name, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        body = lines[i + 1:i + 1 + rows]
        tensors[name] = np.array([[float(x) for x in r.split()] for r in body],
                                 dtype=np.float64).reshape(rows, cols)
        i += 1 + rows
    return descriptor, tensors


def save_params(params: GnnParams, path) -> Path:
    return write_record(path, {"type": "gnn", **params.arch.to_dict()}, params.tensors)


def load_params(path) -> GnnParams:
    descriptor, tensors = read_record(path)
    if descriptor.get("type") != "gnn":
        raise ValueError(f"{path}: record is not a GNN checkpoint")
    return GnnParams(Architecture.from_dict(descriptor), tensors)
