"""Federated training loop and server-side aggregation rules."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import ShifterAttacker, apply_shifter, random_trigger_baseline
from .graphs import Graph, budget_count
from .models import GnnParams, evaluate_accuracy, train_local
from .seeding import stream, substream_seed

log = logging.getLogger(__name__)


class AggregationError(ValueError):
    pass


# ---------------------------------------------------------------- aggregators (flat vectors)

def _stack(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if not len(vectors):
        raise AggregationError("no updates to aggregate")
    shapes = {np.shape(v) for v in vectors}
    if len(shapes) != 1:
        raise AggregationError(f"updates have mismatched shapes {sorted(shapes)}")
    return np.asarray(np.stack(vectors), dtype=np.float64)


def fedavg_vectors(vectors: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    x = _stack(vectors)
    if weights is None:
        return x.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (x.shape[0],) or np.any(w < 0) or w.sum() <= 0:
        raise AggregationError("fedavg weights must be non-negative with a positive sum")
    return (w[:, None] * x).sum(axis=0) / w.sum()


def krum_scores(x: np.ndarray, f_byz: int) -> np.ndarray:
    """Sum of squared distances from each row to its ``n - f - 2`` nearest rows."""
    n = x.shape[0]
    m = max(n - f_byz - 2, 1)
    sq = (x * x).sum(axis=1)
    d = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, :m].sum(axis=1)


def krum_select(vectors: Sequence[np.ndarray], f_byz: int) -> int:
    x = _stack(vectors)
    if x.shape[0] < f_byz + 3:
        raise AggregationError(f"krum needs N >= f+3, got N={x.shape[0]}, f={f_byz}")
    return int(np.argmin(krum_scores(x, f_byz)))  # lowest id wins ties


def bulyan_vectors(vectors: Sequence[np.ndarray], f_byz: int) -> tuple[np.ndarray, list[int]]:
    x = _stack(vectors)
    n = x.shape[0]
    if n < 4 * f_byz + 3:
        raise AggregationError(f"bulyan needs N >= 4f+3, got N={n}, f={f_byz}")
    pool = list(range(n))
    selected = []
    for _ in range(n - 2 * f_byz):
        if len(pool) == 1:
            selected.append(pool.pop())
            break
        best = int(np.argmin(krum_scores(x[pool], f_byz)))
        selected.append(pool.pop(best))
    chosen = np.sort(np.array(selected))
    beta = len(chosen) - 2 * f_byz
    sub = x[chosen]                                   # rows ordered by client id
    by_value = np.argsort(sub, axis=0, kind="stable")  # ties keep id order
    vals = np.take_along_axis(sub, by_value, axis=0)
    med = np.median(sub, axis=0)
    closest = np.argsort(np.abs(vals - med), axis=0, kind="stable")[:beta]
    return np.take_along_axis(vals, closest, axis=0).mean(axis=0), [int(i) for i in selected]


def foolsgold_weights(histories: Sequence[np.ndarray]) -> np.ndarray:
    h = _stack(histories)
    n = h.shape[0]
    norms = np.linalg.norm(h, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    cs = (h @ h.T) / np.outer(safe, safe)
    cs[norms == 0, :] = 0.0
    cs[:, norms == 0] = 0.0
    if n == 1:
        return np.ones(1)
    np.fill_diagonal(cs, -np.inf)
    v = cs.max(axis=1)
    for i in range(n):
        for j in range(n):
            if i != j and v[j] > v[i]:
                cs[i, j] *= v[i] / v[j]
    w = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    if w.max() > 0:
        w = w / w.max()
    w[w == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        w = np.log(w / (1.0 - w)) + 0.5
    w[np.isposinf(w)] = 1.0
    w[np.isneginf(w)] = 0.0
    return np.clip(w, 0.0, 1.0)


def foolsgold_vectors(vectors: Sequence[np.ndarray], histories: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    x = _stack(vectors)
    if _stack(histories).shape != x.shape:
        raise AggregationError("histories must match the updates' shape")
    w = foolsgold_weights(histories)
    if w.sum() <= 0:
        log.warning("all FoolsGold weights are zero; falling back to the plain mean")
        return x.mean(axis=0), w
    return (w[:, None] * x).sum(axis=0) / w.sum(), w


# ---------------------------------------------------------------- aggregators (parameters)

def fedavg(updates: Sequence[GnnParams], weights: Sequence[float] | None = None) -> GnnParams:
    return updates[0].from_flat(fedavg_vectors([u.flatten() for u in updates], weights))


def krum(updates: Sequence[GnnParams], f_byz: int) -> GnnParams:
    return updates[krum_select([u.flatten() for u in updates], f_byz)].copy()


def bulyan(updates: Sequence[GnnParams], f_byz: int) -> GnnParams:
    vec, _ = bulyan_vectors([u.flatten() for u in updates], f_byz)
    return updates[0].from_flat(vec)


def foolsgold(updates: Sequence[GnnParams], histories: Sequence[np.ndarray]) -> GnnParams:
    vec, _ = foolsgold_vectors([u.flatten() for u in updates], histories)
    return updates[0].from_flat(vec)


@dataclass
class Server:
    """Applies one aggregation rule and keeps the state it needs (FoolsGold history)."""

    kind: str
    f_byz: int = 0
    weighted: bool = False
    history: np.ndarray | None = None

    def aggregate(self, current: GnnParams, updates: Sequence[GnnParams],
                  sizes: Sequence[int]) -> tuple[GnnParams, str]:
        vecs = [u.flatten() for u in updates]
        if self.kind == "fedavg":
            vec = fedavg_vectors(vecs, sizes if self.weighted else None)
            return current.from_flat(vec), ""
        if self.kind == "krum":
            i = krum_select(vecs, self.f_byz)
            return updates[i].copy(), str(i)
        if self.kind == "bulyan":
            vec, selected = bulyan_vectors(vecs, self.f_byz)
            return current.from_flat(vec), ";".join(map(str, sorted(selected)))
        if self.kind == "foolsgold":
            base = current.flatten()
            deltas = np.stack(vecs) - base
            self.history = deltas if self.history is None else self.history + deltas
            vec, w = foolsgold_vectors(vecs, list(self.history))
            return current.from_flat(vec), ";".join(repr(float(x)) for x in w)
        raise AggregationError(f"unknown aggregator {self.kind!r}")


# ---------------------------------------------------------------- clients

@dataclass
class Client:
    id: int
    graphs: list[Graph]

    role = "benign"

    def training_view(self, global_model: GnnParams, round_index: int) -> list[Graph]:
        return self.graphs

    def update(self, global_model: GnnParams, round_index: int, cfg, seed: int) -> GnnParams:
        view = self.training_view(global_model, round_index)
        local_seed = substream_seed(seed, "local", self.id, round_index)
        return train_local(global_model, view, cfg.local_epochs, cfg.local_lr, local_seed, cfg.batch_size)


class BenignClient(Client):
    pass


@dataclass
class ShifterClient(Client):
    attacker: ShifterAttacker | None = None
    fl_tune: bool = True
    tune_epochs: int = 1
    recluster_every: int = 5

    role = "malicious"

    def training_view(self, global_model: GnnParams, round_index: int) -> list[Graph]:
        if self.fl_tune:
            self.attacker.fl_tune(global_model, round_index, self.tune_epochs, self.recluster_every)
        view = self.attacker.poisoned_view()
        self.attacker.check_labels()
        return view


@dataclass
class RandomTriggerClient(Client):
    """Classic backdoor: a fixed random trigger on a few graphs relabeled to the target."""

    target_class: int = 1
    p: float = 0.1
    n_tri: float = 0.1
    f: float = 0.1
    trigger_seed: int = 0
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    pick_seed: int = 0
    _view: list[Graph] | None = None

    role = "malicious"

    def training_view(self, global_model: GnnParams, round_index: int) -> list[Graph]:
        if self._view is None:
            others = [i for i, g in enumerate(self.graphs) if g.label != self.target_class]
            count = min(budget_count(self.p, len(others)), len(others))
            rng = stream(self.pick_seed, "random-trigger-pick", self.id)
            picked = rng.choice(others, size=count, replace=False) if count else []
            view = list(self.graphs)
            for i in picked:
                g = self.graphs[i]
                s = random_trigger_baseline(g, self.n_tri, self.f, self.trigger_seed, self.lo, self.hi)
                poisoned = apply_shifter(g, s, self.lo, self.hi)
                view[i] = Graph(poisoned.num_nodes, poisoned.edges, poisoned.features, self.target_class,
                                poisoned.weights, poisoned.directed, poisoned._cache)
            self._view = view
        return self._view


# ---------------------------------------------------------------- training loop

@dataclass(frozen=True)
class RoundRecord:
    round: int
    oa: float
    aggregator: str
    decision: str
    norms: tuple[float, ...]
    participants: tuple[int, ...] = field(default=())


ROUND_HEADER = ["round", "oa", "aggregator", "selected_or_weights", "update_norms"]


def write_rounds(records: Sequence[RoundRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROUND_HEADER)
        for r in records:
            w.writerow([r.round, repr(r.oa), r.aggregator, r.decision, ";".join(repr(x) for x in r.norms)])
    return path


def run_training(cfg, clients: Sequence[Client], init: GnnParams, test_graphs: Sequence[Graph],
                 seed: int, rounds: int | None = None) -> tuple[GnnParams, list[RoundRecord]]:
    """Synchronous rounds: broadcast, local updates in client-id order, aggregate."""
    rounds = cfg.rounds if rounds is None else rounds
    clients = sorted(clients, key=lambda c: c.id)
    f_byz = sum(1 for c in clients if c.role == "malicious")
    server = Server(cfg.aggregator, f_byz, cfg.weighted_fedavg)
    sizes = [len(c.graphs) for c in clients]
    theta = init.copy()
    records = []
    for t in range(1, rounds + 1):
        updates = [c.update(theta, t, cfg, seed) for c in clients]
        norms = tuple(float(np.linalg.norm(u.flatten() - theta.flatten())) for u in updates)
        try:
            theta, decision = server.aggregate(theta, updates, sizes)
        except AggregationError as exc:
            raise AggregationError(f"round {t}: {exc}") from exc
        oa = evaluate_accuracy(theta, list(test_graphs)) if test_graphs else float("nan")
        records.append(RoundRecord(t, oa, cfg.aggregator, decision, norms, tuple(c.id for c in clients)))
    return theta, records
