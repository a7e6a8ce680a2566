"""Shifter attack: generator training, poisoning plan, perturbation finding.

A *shifter* is a feature-only perturbation of a few high-clustering nodes
of a graph, restricted to a small budget of feature dimensions.  A small
generator network produces it per graph.  Stage 1 trains the generator
against the attacker's local model so poisoned training graphs drift
toward the target class without crossing the decision boundary; Stage 2
fine-tunes it against the frozen global model so that test graphs do
cross it.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .graphs import Graph, budget_count, top_k_nodes
from .models import (GnnParams, GraphBatch, _message_structure, as_tensors,
                     classify_tensor, embed_tensor, encode, forward, read_record, write_record)
from .seeding import stream

log = logging.getLogger(__name__)

GENERATOR_SLOPE = 0.01


# ---------------------------------------------------------------- integrity

@dataclass
class IntegrityMonitor:
    """Counts shifter activity and records invariant violations."""

    shifter_calls: int = 0
    violations: list[str] = field(default_factory=list)

    def reset(self) -> None:
        self.shifter_calls = 0
        self.violations.clear()

    def flag(self, message: str) -> None:
        log.error("integrity violation: %s", message)
        self.violations.append(message)

    def check_budget(self, shifter: "Shifter", graph: Graph, n_tri: float, f: float) -> None:
        want_nodes = budget_count(n_tri, graph.num_nodes)
        want_dims = budget_count(f, graph.feature_dim)
        if len(shifter.positions) != want_nodes:
            self.flag(f"|V_p|={len(shifter.positions)} but budget is {want_nodes}")
        if int(shifter.dim_mask.sum()) != want_dims:
            self.flag(f"mask has {int(shifter.dim_mask.sum())} dims but budget is {want_dims}")

    def check_structure(self, original: Graph, poisoned: Graph) -> None:
        if not np.array_equal(original.edges, poisoned.edges) or original.label != poisoned.label:
            self.flag("poisoned graph differs from its original outside the node features")


monitor = IntegrityMonitor()


def label_checksum(graphs: Sequence[Graph]) -> int:
    return zlib.crc32(np.array([g.label for g in graphs], dtype=np.int64).tobytes())


# ---------------------------------------------------------------- types

@dataclass(frozen=True)
class Shifter:
    positions: np.ndarray   # node ids V_p
    delta: np.ndarray       # |V_p| x d, zero outside dim_mask
    dim_mask: np.ndarray    # bool, length d

    def validate(self, graph: Graph) -> None:
        pos = self.positions
        if len(np.unique(pos)) != len(pos):
            raise ValueError("shifter positions are not distinct")
        if len(pos) and (pos.min() < 0 or pos.max() >= graph.num_nodes):
            raise IndexError(f"shifter position out of range for a {graph.num_nodes}-node graph")
        if self.delta.shape != (len(pos), graph.feature_dim):
            raise ValueError(f"delta shape {self.delta.shape} does not fit the graph")
        if np.any(self.delta[:, ~self.dim_mask] != 0):
            raise ValueError("delta is non-zero outside the dimension mask")


@dataclass
class GeneratorParams:
    """Per-node perturbation network.

    ``mlp``: input ``[x_v, mean_u x_u]`` -> hidden (leaky ReLU) -> d outputs.
    ``gcn``: one GCN propagation of ``[x, mean x]`` -> hidden -> d outputs.
    Outputs are multiplied by ``scale`` (half the feature range per dim), so a
    unit output moves a feature by half its observed spread.
    """

    kind: str
    feature_dim: int
    tensors: dict[str, np.ndarray]
    scale: np.ndarray

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.kind, self.feature_dim,
                               {k: v.copy() for k, v in self.tensors.items()}, self.scale.copy())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])


def init_generator(feature_dim: int, seed: int, hidden: int = 32, kind: str = "mlp",
                   scale: np.ndarray | None = None, zero_output: bool = False) -> GeneratorParams:
    """Glorot-initialized generator; ``zero_output`` zeroes the last layer (ΔX = 0)."""
    if kind not in ("mlp", "gcn"):
        raise ValueError(f"unknown generator kind {kind!r}")
    rng = stream(seed, "generator-init")
    d_in = 2 * feature_dim

    def glorot(a, b):
        lim = np.sqrt(6.0 / (a + b))
        return rng.uniform(-lim, lim, size=(a, b))

    tensors = {"G0": glorot(d_in, hidden), "g0": np.zeros((1, hidden)),
               "G1": glorot(hidden, feature_dim), "g1": np.zeros((1, feature_dim))}
    if zero_output:
        tensors["G1"] = np.zeros((hidden, feature_dim))
    scale = np.ones((1, feature_dim)) if scale is None else np.asarray(scale, dtype=np.float64).reshape(1, -1)
    if scale.shape[1] != feature_dim:
        raise ValueError("generator scale must have one entry per feature dimension")
    return GeneratorParams(kind, feature_dim, tensors, scale)


def range_scale(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    half = (np.asarray(hi) - np.asarray(lo)) / 2.0
    return np.where(half > 0, half, 1.0).reshape(1, -1)


def save_generator(gen: GeneratorParams, path):
    desc = {"type": "generator", "kind": gen.kind, "feature_dim": gen.feature_dim}
    return write_record(path, desc, {**gen.tensors, "scale": gen.scale})


def load_generator(path) -> GeneratorParams:
    desc, tensors = read_record(path)
    if desc.get("type") != "generator":
        raise ValueError(f"{path}: not a generator record")
    scale = tensors.pop("scale")
    return GeneratorParams(desc["kind"], int(desc["feature_dim"]), tensors, scale)


# ---------------------------------------------------------------- clustering

@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray  # k x h

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def cosine_objective(embeddings: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    u, c = _unit_rows(embeddings), centroids[assign]
    cn = np.linalg.norm(c, axis=1)
    sims = np.where(cn > 0, (u * c).sum(axis=1) / np.where(cn > 0, cn, 1.0), 0.0)
    return float(np.sum(1.0 - sims))


def _cos_dist_matrix(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    cn = np.linalg.norm(centroids, axis=1)
    safe = np.where(cn > 0, cn, 1.0)
    sims = _unit_rows(x) @ (centroids / safe[:, None]).T
    sims[:, cn == 0] = 0.0
    return 1.0 - sims


def kmeans_cosine(embeddings: np.ndarray, k: int, seed: int, max_iters: int = 100,
                  objective_log: list | None = None) -> ClusterModel:
    """Lloyd iterations with cosine-distance assignment and mean updates.

    Seeding is k-means++ on cosine distance.  Ties in assignment go to the
    lowest centroid index; an empty cluster keeps its previous centroid.
    ``objective_log`` receives the summed cosine distance after every update.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k or k < 1:
        raise ValueError(f"k-means needs at least k={k} embeddings, got {x.shape[0] if x.ndim == 2 else 0}")
    if np.any(np.linalg.norm(x, axis=1) == 0):
        raise ValueError("k-means with cosine distance needs non-zero embeddings")
    rng = stream(seed, "kmeans")
    chosen = [int(rng.integers(x.shape[0]))]
    for _ in range(1, k):
        d = _cos_dist_matrix(x, x[chosen]).min(axis=1)
        d = np.clip(d, 0.0, None) ** 2
        d[chosen] = 0.0
        if d.sum() <= 0:
            rest = [i for i in range(x.shape[0]) if i not in chosen]
            chosen.append(int(rest[0]))
        else:
            chosen.append(int(rng.choice(x.shape[0], p=d / d.sum())))
    centroids = x[chosen].copy()
    assign = None
    for _ in range(max_iters):
        new_assign = np.argmin(_cos_dist_matrix(x, centroids), axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        if objective_log is not None:
            objective_log.append(cosine_objective(x, centroids, assign))
    return ClusterModel(centroids)


def nearest_centroid(v: np.ndarray, model: ClusterModel) -> np.ndarray:
    """Euclidean-nearest centroid, lowest index on ties."""
    if model.k == 0:
        raise ValueError("empty cluster model")
    d = np.linalg.norm(model.centroids - np.asarray(v).reshape(1, -1), axis=1)
    return model.centroids[int(np.argmin(d))]


def target_clusters(params: GnnParams, graphs: Sequence[Graph], k: int, seed: int,
                    max_iters: int = 100) -> ClusterModel:
    """Centroids of the target-class embeddings under ``params``.

    With fewer target graphs than ``k`` every embedding becomes its own centroid.
    """
    emb = encode(params, GraphBatch.of(list(graphs)))
    return kmeans_cosine(emb, min(k, len(graphs)), seed, max_iters)


# ---------------------------------------------------------------- losses

def loss_dist(v: np.ndarray, c: np.ndarray) -> float:
    v, c = np.ravel(v), np.ravel(c)
    nv, nc = np.linalg.norm(v), np.linalg.norm(c)
    if nv == 0 or nc == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(1.0 - v @ c / (nv * nc))


def _dist_tensor(v: ad.Tensor, c: np.ndarray) -> ad.Tensor:
    return ad.sub(ad.constant(np.ones((1, 1))), ad.cosine_similarity(v, ad.constant(c.reshape(1, -1))))


def _homo_tensor(x: ad.Tensor, graph: Graph, tau: float) -> ad.Tensor:
    e = graph.edges
    if len(e) == 0:
        log.debug("homophily loss on an edgeless graph is 0")
        return ad.constant(np.zeros((1, 1)))
    sims = ad.cosine_similarity(ad.gather_rows(x, e[:, 0]), ad.gather_rows(x, e[:, 1]))
    return ad.mean(ad.relu(ad.sub(ad.constant(np.full((1, 1), tau)), sims)))


def loss_homo(graph: Graph, tau: float) -> float:
    """Mean hinge ``max(0, tau - cos(x_u, x_v))`` over edges; 0 for edgeless graphs."""
    return _homo_tensor(ad.constant(graph.features), graph, tau).item()


def _ce(logits, label: int) -> float:
    z = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    if not 0 <= label < z.shape[1]:
        raise ValueError(f"label {label} out of range for {z.shape[1]} classes")
    return ad.cross_entropy(ad.constant(z), [label]).item()


def loss_ce_source(logits, source_label: int) -> float:
    return _ce(logits, source_label)


def loss_ce_target(logits, target_label: int) -> float:
    return _ce(logits, target_label)


# ---------------------------------------------------------------- poison plan

@dataclass(frozen=True)
class PoisonPlan:
    poison_indices: tuple[int, ...]    # positions in the client's local list
    target_class: int
    target_indices: tuple[int, ...]
    eligible_indices: tuple[int, ...]


def build_poison_plan(graphs: Sequence[Graph], params: GnnParams, target_class: int, p: float,
                      clusters: ClusterModel) -> PoisonPlan:
    """Choose the eligible graphs farthest (cosine) from their nearest target centroid."""
    labels = np.array([g.label for g in graphs])
    target = np.flatnonzero(labels == target_class)
    if len(target) == 0:
        raise ValueError(f"no local graphs of target class {target_class}")
    others = np.flatnonzero(labels != target_class)
    if len(others) == 0:
        raise ValueError("no local graphs outside the target class")
    emb, logits = forward(params, GraphBatch.of([graphs[i] for i in others]))
    correct = np.argmax(logits, axis=1) == labels[others]
    eligible = others[correct]
    if len(eligible) == 0:
        raise ValueError("no non-target graph is classified correctly by the local model")
    emb = emb[correct]
    dist = np.array([loss_dist(e, nearest_centroid(e, clusters)) for e in emb])
    order = np.lexsort((eligible, -dist))
    count = budget_count(p, len(eligible)) if p > 0 else 0
    return PoisonPlan(tuple(int(i) for i in eligible[order[:count]]), target_class,
                      tuple(int(i) for i in target), tuple(int(i) for i in eligible))


# ---------------------------------------------------------------- generation

def _top_dims(raw: np.ndarray, m: int) -> np.ndarray:
    score = np.abs(raw).mean(axis=0)
    mask = np.zeros(raw.shape[1], dtype=bool)
    mask[np.argsort(-score, kind="stable")[:m]] = True
    return mask


def _straight_through(raw: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """Forward ``raw * mask``; backward passes the gradient to every dimension."""
    return ad.record(raw.value * mask, "straight_through_mask", (raw,), lambda g: (g,))


def _generator_raw(gen: GeneratorParams, t: dict, graph: Graph, positions: np.ndarray) -> ad.Tensor:
    x = graph.features
    ctx = np.broadcast_to(x.mean(axis=0, keepdims=True), x.shape)
    inp = np.concatenate([x, ctx], axis=1)
    if gen.kind == "mlp":
        h_in = ad.constant(inp[positions])
        h = ad.leaky_relu(ad.add(ad.matmul(h_in, t["G0"]), t["g0"]), GENERATOR_SLOPE)
    else:
        src, dst, coef = _message_structure(graph)
        z = ad.matmul(ad.constant(inp), t["G0"])
        agg = ad.scatter_add_rows(ad.mul(ad.gather_rows(z, src), ad.constant(coef)), dst, graph.num_nodes)
        h = ad.gather_rows(ad.leaky_relu(ad.add(agg, t["g0"]), GENERATOR_SLOPE), positions)
    out = ad.add(ad.matmul(h, t["G1"]), t["g1"])
    return ad.mul(out, ad.constant(gen.scale))


def shifter_positions(graph: Graph, n_tri: float) -> np.ndarray:
    if graph.num_nodes == 0:
        raise ValueError("cannot place a shifter in an empty graph")
    count = budget_count(n_tri, graph.num_nodes)
    if count < 1:
        raise ValueError("trigger node ratio selects no nodes")
    return np.asarray(top_k_nodes(graph, count), dtype=np.int64)


def _shifter_tensor(gen: GeneratorParams, t: dict, graph: Graph, n_tri: float, f: float,
                    straight_through: bool) -> tuple[np.ndarray, ad.Tensor, np.ndarray]:
    positions = shifter_positions(graph, n_tri)
    raw = _generator_raw(gen, t, graph, positions)
    mask = _top_dims(raw.value, budget_count(f, graph.feature_dim))
    if straight_through:
        delta = _straight_through(raw, mask)
    else:
        delta = ad.mul(raw, ad.constant(np.broadcast_to(mask, raw.shape).astype(np.float64)))
    return positions, delta, mask


def generate_shifter(gen: GeneratorParams, graph: Graph, n_tri: float, f: float) -> Shifter:
    t = {k: ad.constant(v) for k, v in gen.tensors.items()}
    positions, delta, mask = _shifter_tensor(gen, t, graph, n_tri, f, straight_through=False)
    shifter = Shifter(positions, delta.value, mask)
    monitor.shifter_calls += 1
    monitor.check_budget(shifter, graph, n_tri, f)
    return shifter


def _bounds(x_rows: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Widen the clamp so it never moves a feature that the shifter leaves alone.
    return np.minimum(lo.reshape(1, -1), x_rows), np.maximum(hi.reshape(1, -1), x_rows)


def _clamp(a: ad.Tensor, lo: np.ndarray, hi: np.ndarray) -> ad.Tensor:
    """Clamp with a gradient that may still pull a pinned value back inside.

    Where the value sits at (or beyond) a bound, the gradient is kept only if
    a descent step would move it back into the range, so a generator that
    overshoots to the wrong bound is not frozen there.
    """
    v = a.value
    out = np.minimum(np.maximum(v, lo), hi)
    below, above = v < lo, v > hi

    def bw(g):
        keep = ~(below & (g > 0)) & ~(above & (g < 0))
        return (np.where(keep, g, 0.0),)

    return ad.record(out, "clamp", (a,), bw)


def _apply_tensor(graph: Graph, positions: np.ndarray, delta: ad.Tensor,
                  lo: np.ndarray, hi: np.ndarray) -> ad.Tensor:
    x_rows = graph.features[positions]
    lo_eff, hi_eff = _bounds(x_rows, lo, hi)
    shifted = _clamp(ad.add(ad.constant(x_rows), delta), lo_eff, hi_eff)
    change = ad.sub(shifted, ad.constant(x_rows))
    return ad.add(ad.constant(graph.features), ad.scatter_add_rows(change, positions, graph.num_nodes))


def apply_shifter(graph: Graph, shifter: Shifter, lo: np.ndarray, hi: np.ndarray) -> Graph:
    """Add the shifter to its nodes, clamped per dimension to ``[lo, hi]``."""
    shifter.validate(graph)
    monitor.shifter_calls += 1
    if not np.any(shifter.delta):
        return graph.with_features(graph.features)
    x = graph.features.copy()
    rows = x[shifter.positions]
    lo_eff, hi_eff = _bounds(rows, np.asarray(lo), np.asarray(hi))
    x[shifter.positions] = np.clip(rows + shifter.delta, lo_eff, hi_eff)
    poisoned = graph.with_features(x)
    monitor.check_structure(graph, poisoned)
    return poisoned


def aggregate_perturbations(shifters: Sequence[Shifter]) -> Shifter:
    """Elementwise mean of the clients' perturbations, re-masked to the same budget."""
    if not shifters:
        raise ValueError("nothing to aggregate")
    first = shifters[0]
    if len(shifters) == 1:
        return first
    for s in shifters[1:]:
        if not np.array_equal(s.positions, first.positions):
            raise AssertionError("malicious clients disagree on shifter positions")
    mean = np.mean([s.delta for s in shifters], axis=0)
    mask = _top_dims(mean, int(first.dim_mask.sum()))
    return Shifter(first.positions, np.where(mask, mean, 0.0), mask)


def random_trigger_baseline(graph: Graph, n_tri: float, f: float, seed: int,
                            lo: np.ndarray, hi: np.ndarray) -> Shifter:
    """Random-trigger stand-in: fixed random dims and values, random node placement.

    The dimensions and their target values depend only on ``seed``, so every
    graph carries the same pattern; node positions are drawn per graph.
    """
    d = graph.feature_dim
    m = budget_count(f, d)
    pattern = stream(seed, "random-trigger")
    dims = np.sort(pattern.choice(d, size=m, replace=False))
    values = pattern.uniform(np.asarray(lo)[dims], np.asarray(hi)[dims])
    graph_key = zlib.crc32(graph.features.tobytes() + graph.edges.tobytes())
    where = stream(seed, "random-trigger-nodes", graph_key)
    count = budget_count(n_tri, graph.num_nodes)
    positions = np.sort(where.choice(graph.num_nodes, size=count, replace=False)).astype(np.int64)
    mask = np.zeros(d, dtype=bool)
    mask[dims] = True
    delta = np.zeros((count, d))
    delta[:, dims] = values - graph.features[np.ix_(positions, dims)]
    shifter = Shifter(positions, delta, mask)
    monitor.shifter_calls += 1
    monitor.check_budget(shifter, graph, n_tri, f)
    return shifter


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class AttackSettings:
    n_tri: float = 0.1
    f: float = 0.1
    lambda_dist: float = 1.0
    lambda_homo: float = 0.1
    lambda_ce: float = 0.5
    tau: float = 0.5
    eta: float = 0.01
    stage2_eta: float = 0.01
    straight_through: bool = True

    @classmethod
    def from_config(cls, cfg) -> "AttackSettings":
        return cls(cfg.n_tri, cfg.f, cfg.lambda_dist, cfg.lambda_homo, cfg.lambda_ce, cfg.tau,
                   cfg.eta, cfg.stage2_eta, cfg.straight_through_mask)


def _poisoned_tensors(gen: GeneratorParams, t: dict, graph: Graph, s: AttackSettings,
                      lo: np.ndarray, hi: np.ndarray) -> ad.Tensor:
    positions, delta, _ = _shifter_tensor(gen, t, graph, s.n_tri, s.f, s.straight_through)
    monitor.shifter_calls += 1
    return _apply_tensor(graph, positions, delta, lo, hi)


def stage1_step(gen: GeneratorParams, t: dict, model: GnnParams, model_t: dict, graph: Graph,
                clusters: ClusterModel, s: AttackSettings, lo, hi) -> float:
    """One SGD step of the Stage-1 objective on one graph; updates ``t`` in place."""
    x_p = _poisoned_tensors(gen, t, graph, s, lo, hi)
    batch = GraphBatch.of([graph])
    emb = embed_tensor(model.arch, model_t, batch, x_p)
    c_near = nearest_centroid(emb.value, clusters)
    loss = ad.add(ad.add(ad.scale(_dist_tensor(emb, c_near), s.lambda_dist),
                         ad.scale(_homo_tensor(x_p, graph, s.tau), s.lambda_homo)),
                  ad.scale(ad.cross_entropy(classify_tensor(model_t, emb), [graph.label]), s.lambda_ce))
    ad.backward(loss)
    ad.sgd_step(list(t.values()), s.eta)
    return loss.item()


def _run_epochs(gen: GeneratorParams, epochs: int, step: Callable[[dict], list[float]],
                loss_log: list | None) -> GeneratorParams:
    t = {k: ad.parameter(v) for k, v in gen.tensors.items()}
    for _ in range(epochs):
        losses = step(t)
        if loss_log is not None:
            loss_log.append(float(np.mean(losses)) if losses else 0.0)
    out = GeneratorParams(gen.kind, gen.feature_dim, {k: v.value.copy() for k, v in t.items()},
                          gen.scale.copy())
    if not out.is_finite():
        raise FloatingPointError("non-finite generator parameters")
    return out


def stage1_train(gen: GeneratorParams, model: GnnParams, graphs: Sequence[Graph], plan: PoisonPlan,
                 clusters: ClusterModel, settings: AttackSettings, epochs: int,
                 lo: np.ndarray, hi: np.ndarray, loss_log: list | None = None) -> GeneratorParams:
    """Train the generator so poisoned graphs approach the target clusters.

    Labels stay untouched: the cross-entropy term uses each graph's own label.
    """
    model_t = as_tensors(model)
    pool = [graphs[i] for i in plan.poison_indices]

    def epoch(t):
        return [stage1_step(gen, t, model, model_t, g, clusters, settings, lo, hi) for g in pool]

    return _run_epochs(gen, epochs, epoch, loss_log)


def stage2_step(gen: GeneratorParams, t: dict, model: GnnParams, model_t: dict, graph: Graph,
                target_class: int, s: AttackSettings, lo, hi) -> float:
    x_p = _poisoned_tensors(gen, t, graph, s, lo, hi)
    emb = embed_tensor(model.arch, model_t, GraphBatch.of([graph]), x_p)
    attack = ad.cross_entropy(classify_tensor(model_t, emb), [target_class])
    loss = ad.add(attack, ad.scale(_homo_tensor(x_p, graph, s.tau), s.lambda_homo))
    ad.backward(loss)
    ad.sgd_step(list(t.values()), s.stage2_eta)
    return loss.item()


def poison_graphs(gen: GeneratorParams, graphs: Sequence[Graph], settings: AttackSettings,
                  lo: np.ndarray, hi: np.ndarray) -> list[Graph]:
    return [apply_shifter(g, generate_shifter(gen, g, settings.n_tri, settings.f), lo, hi) for g in graphs]


def local_asr(model: GnnParams, gen: GeneratorParams, graphs: Sequence[Graph], target_class: int,
              settings: AttackSettings, lo, hi) -> float:
    if not graphs:
        return 0.0
    from .models import predict
    return float(np.mean(predict(model, poison_graphs(gen, graphs, settings, lo, hi)) == target_class))


@dataclass(frozen=True)
class Stage2Trace:
    epoch: int
    asr: float
    loss: float


def stage2_finetune(gen: GeneratorParams, model: GnnParams, graphs: Sequence[Graph],
                    pool_indices: Sequence[int], target_class: int, settings: AttackSettings,
                    epochs: int, lo: np.ndarray, hi: np.ndarray,
                    trace: list | None = None) -> GeneratorParams:
    """Fine-tune against the frozen ``model`` so pool graphs get classified as the target.

    ``trace`` receives one :class:`Stage2Trace` per epoch (ASR on the pool).
    """
    model_t = as_tensors(model)
    pool = [graphs[i] for i in pool_indices]
    gen_now = gen
    t = {k: ad.parameter(v) for k, v in gen.tensors.items()}
    for epoch in range(1, epochs + 1):
        losses = [stage2_step(gen, t, model, model_t, g, target_class, settings, lo, hi) for g in pool]
        gen_now = GeneratorParams(gen.kind, gen.feature_dim, {k: v.value.copy() for k, v in t.items()},
                                  gen.scale.copy())
        if not gen_now.is_finite():
            raise FloatingPointError("non-finite generator parameters")
        if trace is not None:
            trace.append(Stage2Trace(epoch, local_asr(model, gen_now, pool, target_class, settings, lo, hi),
                                     float(np.mean(losses)) if losses else 0.0))
    return gen_now.copy() if epochs > 0 else gen.copy()


# ---------------------------------------------------------------- malicious client state

@dataclass
class ShifterAttacker:
    """Everything a shifter-injecting client keeps between rounds."""

    graphs: list[Graph]
    target_class: int
    settings: AttackSettings
    lo: np.ndarray
    hi: np.ndarray
    generator: GeneratorParams
    local_model: GnnParams
    clusters: ClusterModel
    plan: PoisonPlan
    k: int = 3
    kmeans_iters: int = 100
    seed: int = 0
    stage1_snapshot: GeneratorParams | None = None
    label_sum: int = 0

    @classmethod
    def prepare(cls, graphs: Sequence[Graph], local_model: GnnParams, cfg, seed: int,
                lo: np.ndarray, hi: np.ndarray) -> "ShifterAttacker":
        """Build the plan from the pretrained local model and run Stage 1."""
        graphs = list(graphs)
        settings = AttackSettings.from_config(cfg)
        targets = [g for g in graphs if g.label == cfg.target_class]
        if not targets:
            raise ValueError(f"no local graphs of target class {cfg.target_class}")
        clusters = target_clusters(local_model, targets, cfg.k, seed, cfg.kmeans_iters)
        plan = build_poison_plan(graphs, local_model, cfg.target_class, cfg.p, clusters)
        gen = init_generator(graphs[0].feature_dim, seed, cfg.generator_hidden, cfg.generator,
                             range_scale(lo, hi))
        gen = stage1_train(gen, local_model, graphs, plan, clusters, settings, cfg.stage1_epochs, lo, hi)
        return cls(graphs, cfg.target_class, settings, lo, hi, gen, local_model, clusters, plan,
                   cfg.k, cfg.kmeans_iters, seed, gen.copy(), label_checksum(graphs))

    def poisoned_view(self) -> list[Graph]:
        out = list(self.graphs)
        for i in self.plan.poison_indices:
            out[i] = apply_shifter(self.graphs[i], generate_shifter(self.generator, self.graphs[i],
                                                                   self.settings.n_tri, self.settings.f),
                                   self.lo, self.hi)
        return out

    def fl_tune(self, global_model: GnnParams, round_index: int, epochs: int, recluster_every: int) -> None:
        """Stage-1 objective against the current global model for ``epochs`` passes."""
        if epochs <= 0:
            return
        if (round_index - 1) % recluster_every == 0:
            targets = [self.graphs[i] for i in self.plan.target_indices]
            self.clusters = target_clusters(global_model, targets, self.k, self.seed, self.kmeans_iters)
        self.generator = stage1_train(self.generator, global_model, self.graphs, self.plan, self.clusters,
                                      self.settings, epochs, self.lo, self.hi)

    def check_labels(self) -> None:
        if label_checksum(self.graphs) != self.label_sum:
            monitor.flag("training labels changed during the attack")
