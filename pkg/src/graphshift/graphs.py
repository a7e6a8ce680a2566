"""Graph data model, TU-format I/O, synthetic corpora, splits and node ranking."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .seeding import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Graph:
    """A simple graph with node features and a class label.

    ``edges`` is an ``(E, 2)`` int array. Undirected graphs store each edge
    once with ``u < v``. ``weights`` is ``None`` for unweighted graphs.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    label: int
    weights: np.ndarray | None = None
    directed: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, num_nodes: int, edges, features, label: int, weights=None,
              directed: bool = False) -> "Graph":
        """Normalize raw input: drop self-loops, merge duplicate edges (first weight wins)."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != num_nodes:
            raise ValueError(f"features shape {features.shape} does not match {num_nodes} nodes")
        raw = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        w = None if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
        if raw.size and (raw.min() < 0 or raw.max() >= num_nodes):
            raise ValueError(f"edge endpoint out of range for {num_nodes} nodes")
        if w is not None and (w.shape[0] != raw.shape[0] or np.any(w <= 0)):
            raise ValueError("edge weights must be positive, one per edge")
        seen: dict[tuple[int, int], int] = {}
        for i, (u, v) in enumerate(raw.tolist()):
            if u == v:
                continue
            key = (u, v) if directed else (min(u, v), max(u, v))
            seen.setdefault(key, i)
        keys = sorted(seen)
        out_edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
        out_w = None if w is None else np.array([w[seen[k]] for k in keys], dtype=np.float64)
        return cls(num_nodes, out_edges, features, int(label), out_w, directed)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def with_features(self, features: np.ndarray) -> "Graph":
        """Same topology and label, new features; topology caches are shared."""
        g = Graph(self.num_nodes, self.edges, features, self.label, self.weights, self.directed)
        g._cache.update(self._cache)
        return g

    def edge_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.edges.tolist()))

    def adjacency(self, weighted: bool = False) -> sp.csr_matrix:
        """Sparse adjacency; symmetric unless the graph is directed."""
        n = self.num_nodes
        vals = self.weights if (weighted and self.weights is not None) else np.ones(self.num_edges)
        a = sp.csr_matrix((vals, (self.edges[:, 0], self.edges[:, 1])), shape=(n, n))
        if not self.directed:
            a = a + a.T
        return a.tocsr()


@dataclass(frozen=True, eq=False)
class Dataset:
    graphs: tuple[Graph, ...]
    num_classes: int
    feature_dim: int
    name: str = "dataset"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        for i, g in enumerate(self.graphs):
            if not 0 <= g.label < self.num_classes:
                raise ValueError(f"graph {i} label {g.label} outside [0, {self.num_classes})")
            if g.feature_dim != self.feature_dim:
                raise ValueError(f"graph {i} has feature dim {g.feature_dim}, expected {self.feature_dim}")

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i) -> Graph:
        return self.graphs[i]

    def subset(self, indices) -> list[Graph]:
        return [self.graphs[int(i)] for i in indices]

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)


@dataclass(frozen=True)
class Partition:
    client_indices: tuple[np.ndarray, ...]
    test_indices: np.ndarray

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


# ---------------------------------------------------------------- TU format

class TUFormatError(ValueError):
    """Malformed TU dataset file; the message names the file and line."""


def _read_lines(path: Path) -> list[str]:
    return path.read_text().splitlines()


def _parse_ints(path: Path, width: int | None = None) -> list[list[int]]:
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            vals = [int(tok) for tok in line.replace(",", " ").split()]
        except ValueError:
            raise TUFormatError(f"{path.name}:{lineno}: non-integer field in {line!r}") from None
        if width is not None and len(vals) != width:
            raise TUFormatError(f"{path.name}:{lineno}: expected {width} fields, got {len(vals)}")
        rows.append(vals)
    return rows


def _parse_floats(path: Path) -> list[list[float]]:
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError:
            raise TUFormatError(f"{path.name}:{lineno}: non-numeric field in {line!r}") from None
    return rows


def _dataset_prefix(directory: Path) -> str:
    hits = sorted(directory.glob("*_A.txt"))
    if not hits:
        raise TUFormatError(f"{directory}: missing mandatory file <DS>_A.txt")
    if len(hits) > 1:
        raise TUFormatError(f"{directory}: several *_A.txt files: {[h.name for h in hits]}")
    return hits[0].name[: -len("_A.txt")]


def load_tu_dataset(directory) -> Dataset:
    """Load a TU benchmark directory (``DS_A.txt``, ``DS_graph_indicator.txt``, ...).

    Node ids in ``DS_A.txt`` are 1-indexed. Labels are remapped to ``[0, C)``.
    Features come from ``DS_node_attributes.txt`` if present and non-empty,
    else one-hot ``DS_node_labels.txt``, else a single all-ones column.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise TUFormatError(f"{directory}: not a directory")
    name = _dataset_prefix(directory)
    path = {k: directory / f"{name}_{k}.txt"
            for k in ("A", "graph_indicator", "graph_labels", "node_attributes", "node_labels")}
    for k in ("graph_indicator", "graph_labels"):
        if not path[k].exists():
            raise TUFormatError(f"{directory}: missing mandatory file {path[k].name}")

    indicator = np.array([r[0] for r in _parse_ints(path["graph_indicator"], 1)], dtype=np.int64)
    num_nodes = indicator.shape[0]
    raw_labels = [r[0] for r in _parse_ints(path["graph_labels"], 1)]
    num_graphs = len(raw_labels)
    if num_nodes == 0 or num_graphs == 0:
        raise TUFormatError(f"{directory}: empty dataset")
    bad = np.nonzero((indicator < 1) | (indicator > num_graphs))[0]
    if bad.size:
        raise TUFormatError(f"{path['graph_indicator'].name}:{bad[0] + 1}: graph id "
                            f"{indicator[bad[0]]} outside [1, {num_graphs}]")

    edges_by_graph: list[list[tuple[int, int]]] = [[] for _ in range(num_graphs)]
    offsets = np.zeros(num_graphs + 1, dtype=np.int64)
    np.add.at(offsets, indicator, 1)
    first_node = np.cumsum(offsets)[:-1]  # global index of each graph's first node
    if np.any(np.diff(indicator) < 0):
        raise TUFormatError(f"{path['graph_indicator'].name}: node ids are not grouped by graph")
    for lineno, line in enumerate(_read_lines(path["A"]), start=1):
        if not line.strip():
            continue
        try:
            u, v = (int(tok) for tok in line.split(","))
        except ValueError:
            raise TUFormatError(f"{path['A'].name}:{lineno}: expected 'u, v' integers, got {line!r}") from None
        for node in (u, v):
            if not 1 <= node <= num_nodes:
                raise TUFormatError(f"{path['A'].name}:{lineno}: node {node} outside the "
                                    f"{num_nodes} nodes declared in {path['graph_indicator'].name}")
        gu, gv = indicator[u - 1], indicator[v - 1]
        if gu != gv:
            raise TUFormatError(f"{path['A'].name}:{lineno}: edge joins graphs {gu} and {gv}")
        base = first_node[gu - 1]
        edges_by_graph[gu - 1].append((u - 1 - base, v - 1 - base))

    features = None
    if path["node_attributes"].exists():
        rows = _parse_floats(path["node_attributes"])
        if rows:
            if len(rows) != num_nodes:
                raise TUFormatError(f"{path['node_attributes'].name}: {len(rows)} rows for {num_nodes} nodes")
            if len({len(r) for r in rows}) != 1:
                raise TUFormatError(f"{path['node_attributes'].name}: ragged attribute rows")
            features = np.array(rows, dtype=np.float64)
    if features is None and path["node_labels"].exists():
        node_labels = [r[0] for r in _parse_ints(path["node_labels"], 1)]
        if len(node_labels) != num_nodes:
            raise TUFormatError(f"{path['node_labels'].name}: {len(node_labels)} rows for {num_nodes} nodes")
        values = sorted(set(node_labels))
        lookup = {v: i for i, v in enumerate(values)}
        features = np.zeros((num_nodes, len(values)))
        features[np.arange(num_nodes), [lookup[v] for v in node_labels]] = 1.0
    if features is None:
        features = np.ones((num_nodes, 1))

    classes = sorted(set(raw_labels))
    remap = {v: i for i, v in enumerate(classes)}
    graphs = []
    for gi in range(num_graphs):
        lo, n = first_node[gi], offsets[gi + 1]
        graphs.append(Graph.build(int(n), edges_by_graph[gi], features[lo:lo + n],
                                  remap[raw_labels[gi]]))
    return Dataset(tuple(graphs), max(len(classes), 2), features.shape[1], name)


def write_tu_dataset(dataset: Dataset, directory, name: str | None = None) -> Path:
    """Write ``dataset`` in TU format; features go to ``DS_node_attributes.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or dataset.name
    a_rows, ind_rows, attr_rows = [], [], []
    base = 0
    for gi, g in enumerate(dataset.graphs, start=1):
        for u, v in g.edges.tolist():
            a_rows.append(f"{u + 1 + base}, {v + 1 + base}")
            if not g.directed:
                a_rows.append(f"{v + 1 + base}, {u + 1 + base}")
        ind_rows.extend([str(gi)] * g.num_nodes)
        attr_rows.extend(", ".join(repr(float(x)) for x in row) for row in g.features)
        base += g.num_nodes
    (directory / f"{name}_A.txt").write_text("\n".join(a_rows) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text("\n".join(ind_rows) + "\n")
    (directory / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(g.label) for g in dataset.graphs) + "\n")
    (directory / f"{name}_node_attributes.txt").write_text("\n".join(attr_rows) + "\n")
    return directory


def dataset_summary(dataset: Dataset) -> dict:
    labels = dataset.labels
    counts = np.bincount(labels, minlength=dataset.num_classes)
    return {
        "graphs": len(dataset),
        "classes": dataset.num_classes,
        "class_ratio": " / ".join(str(int(c)) for c in counts),
        "avg_nodes": float(np.mean([g.num_nodes for g in dataset.graphs])),
        "avg_edges": float(np.mean([g.num_edges for g in dataset.graphs])),
        "feature_dim": dataset.feature_dim,
    }


# ---------------------------------------------------------------- synthetic corpus

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 2
    graphs_per_class: int = 100
    min_nodes: int = 10
    max_nodes: int = 20
    feature_dim: int = 8
    feature_sep: float = 0.35
    feature_noise: float = 1.0
    p_in: float = 0.7
    heavy_dims: int = 1
    heavy_shift: float = 1.0
    heavy_sigma: float = 1.0
    seed: int = 0


def _community_graph(n: int, p_in: float, rng) -> list[tuple[int, int]]:
    half = n // 2
    block = np.arange(n) < half
    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            if block[u] == block[v] and rng.random() < p_in:
                edges.append((u, v))
    for _ in range(1 + int(rng.integers(0, 2))):
        edges.append((int(rng.integers(0, half)), int(rng.integers(half, n))))
    return edges


def _community_density(n: int, p_in: float) -> float:
    half = n // 2
    within = half * (half - 1) / 2 + (n - half) * (n - half - 1) / 2
    return (within * p_in + 1.5) / (n * (n - 1) / 2)


def _er_graph(n: int, p: float, rng) -> list[tuple[int, int]]:
    return [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    """Even classes: two dense communities joined by a bridge or two; odd
    classes: Erdos-Renyi at the same expected density.

    Node features are Gaussian around a class-specific mean vector, except
    the last ``heavy_dims`` columns, which are log-normal "amount"-like
    values ``exp(N(heavy_shift * class, heavy_sigma))``: heavy-tailed and
    informative, like transaction volumes or counts in real graph corpora.
    """
    if spec.min_nodes < 4 or spec.max_nodes < spec.min_nodes:
        raise ValueError(f"node range [{spec.min_nodes}, {spec.max_nodes}] invalid (min 4)")
    if spec.feature_dim < 4:
        raise ValueError(f"feature_dim must be >= 4, got {spec.feature_dim}")
    if not 0 <= spec.heavy_dims <= spec.feature_dim:
        raise ValueError(f"heavy_dims must lie in [0, {spec.feature_dim}]")
    if spec.num_classes < 2 or spec.graphs_per_class < 1:
        raise ValueError("need >= 2 classes and >= 1 graph per class")
    means = stream(spec.seed, "synthetic", "means").normal(
        0.0, spec.feature_sep, size=(spec.num_classes, spec.feature_dim))
    rng = stream(spec.seed, "synthetic", "graphs")
    graphs = []
    for c in range(spec.num_classes):
        for _ in range(spec.graphs_per_class):
            n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
            if c % 2 == 0:
                edges = _community_graph(n, spec.p_in, rng)
            else:
                edges = _er_graph(n, _community_density(n, spec.p_in), rng)
            x = means[c] + spec.feature_noise * rng.normal(size=(n, spec.feature_dim))
            if spec.heavy_dims:
                x[:, spec.feature_dim - spec.heavy_dims:] = np.exp(
                    rng.normal(spec.heavy_shift * c, spec.heavy_sigma, size=(n, spec.heavy_dims)))
            graphs.append(Graph.build(n, edges, x, c))
    return Dataset(tuple(graphs), spec.num_classes, spec.feature_dim, "synthetic")


# ---------------------------------------------------------------- splits

def split_train_test(dataset_size: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle indices under ``seed``; the first ``ceil(ratio * size)`` train."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    perm = stream(seed, "split").permutation(dataset_size)
    n_train = math.ceil(ratio * dataset_size)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def partition_clients(train_indices, num_clients: int, seed: int,
                      test_indices=None) -> Partition:
    """IID random shards whose sizes differ by at most one."""
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if num_clients < 2:
        raise ValueError(f"need at least 2 clients, got {num_clients}")
    if train_indices.shape[0] < num_clients:
        raise ValueError(f"{train_indices.shape[0]} training graphs cannot fill {num_clients} clients")
    shuffled = train_indices[stream(seed, "partition").permutation(train_indices.shape[0])]
    shards = tuple(np.sort(s) for s in np.array_split(shuffled, num_clients))
    test = np.zeros(0, dtype=np.int64) if test_indices is None else np.asarray(test_indices, dtype=np.int64)
    return Partition(shards, test)


# ---------------------------------------------------------------- clustering coefficients

def coefficient_kind(graph: Graph) -> str:
    """Directed formula iff directed; weighted iff any weight differs from 1."""
    if graph.directed:
        return "directed"
    if graph.weights is not None and np.any(graph.weights != 1.0):
        return "weighted"
    return "unweighted"


def clustering_coefficients(graph: Graph, kind: str | None = None) -> np.ndarray:
    """Clustering coefficient of every node.

    unweighted: ``2 T(u) / (d(u)(d(u)-1))``.
    weighted: sum over ordered neighbour pairs of the cube root of the
    product of the three max-normalized weights, over ``d(u)(d(u)-1)``.
    directed: ``2 T_d(u) / (d_tot(u)(d_tot(u)-1) - 2 d_recip(u))`` where
    ``T_d(u) = ((A + A^T)^3)_uu / 4``.
    Nodes whose denominator is not positive get 0.
    """
    kind = kind or coefficient_kind(graph)
    cache_key = ("cc", kind)
    if cache_key in graph._cache:
        return graph._cache[cache_key]
    n = graph.num_nodes
    if kind == "directed":
        a = sp.csr_matrix((np.ones(graph.num_edges), (graph.edges[:, 0], graph.edges[:, 1])),
                          shape=(n, n))
        if not graph.directed:
            a = a + a.T
        s = (a + a.T).tocsr()
        closed = np.asarray((s @ s).multiply(s).sum(axis=1)).ravel()
        tri = closed / 4.0
        d_tot = np.asarray(a.sum(axis=0)).ravel() + np.asarray(a.sum(axis=1)).ravel()
        d_rec = np.asarray(a.multiply(a.T).sum(axis=1)).ravel()
        denom = d_tot * (d_tot - 1) - 2 * d_rec
        out = np.where(denom > 0, 2 * tri / np.where(denom > 0, denom, 1.0), 0.0)
    elif kind in ("unweighted", "weighted"):
        if graph.directed:
            raise ValueError(f"{kind} coefficient needs an undirected graph")
        a = graph.adjacency(weighted=False)
        deg = np.asarray(a.sum(axis=1)).ravel()
        if kind == "unweighted":
            num = np.asarray((a @ a).multiply(a).sum(axis=1)).ravel()  # = 2 T(u)
        else:
            w = graph.adjacency(weighted=True)
            top = w.max() if w.nnz else 1.0
            r = w.multiply(1.0 / top).power(1.0 / 3.0).tocsr()
            num = np.asarray((r @ r).multiply(r).sum(axis=1)).ravel()
        denom = deg * (deg - 1)
        out = np.where(deg >= 2, num / np.where(deg >= 2, denom, 1.0), 0.0)
    else:
        raise ValueError(f"unknown coefficient kind {kind!r}")
    out = np.asarray(out, dtype=np.float64)
    out.setflags(write=False)
    graph._cache[cache_key] = out
    return out


def clustering_coefficient(graph: Graph, u: int, kind: str | None = None) -> float:
    if not 0 <= u < graph.num_nodes:
        raise IndexError(f"node {u} out of range for {graph.num_nodes} nodes")
    return float(clustering_coefficients(graph, kind)[u])


def top_k_nodes(graph: Graph, k: int) -> np.ndarray:
    """The ``k`` highest-coefficient nodes, descending, ties by ascending index."""
    if not 1 <= k <= graph.num_nodes:
        raise ValueError(f"k={k} outside [1, {graph.num_nodes}]")
    key = ("topk", k)
    if key not in graph._cache:
        c = clustering_coefficients(graph)
        order = np.lexsort((np.arange(graph.num_nodes), -c))
        graph._cache[key] = order[:k].copy()
    return graph._cache[key]


def budget_count(ratio: float, total: int) -> int:
    """``ceil(ratio * total)`` guarded against float noise such as 0.1 * 30."""
    return math.ceil(round(ratio * total, 9))


def feature_range(graphs: Sequence[Graph]) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([g.features for g in graphs], axis=0)
    return x.min(axis=0), x.max(axis=0)
