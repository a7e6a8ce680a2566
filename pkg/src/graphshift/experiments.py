"""Metrics and experiment drivers: full attack pipeline, sweeps, ablations."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attack import (AttackSettings, GeneratorParams, ShifterAttacker, aggregate_perturbations,
                     apply_shifter, generate_shifter, init_generator, monitor, random_trigger_baseline,
                     range_scale, stage2_step)
from .config import ExperimentConfig
from .federation import (BenignClient, Client, RandomTriggerClient, RoundRecord, ShifterClient,
                         run_training)
from .graphs import (Dataset, Graph, SyntheticSpec, feature_range, generate_synthetic, load_tu_dataset,
                     partition_clients, split_train_test)
from .models import Architecture, GnnParams, as_tensors, evaluate_accuracy, init_params, predict, train_local
from . import autodiff as ad
from .seeding import substream_seed

log = logging.getLogger(__name__)

RESULT_HEADER = ["dataset", "N", "cm", "aggregator", "p", "f", "n_tri", "seed", "asr", "oa", "aas"]
CONVERGENCE_HEADER = ["variant", "epoch", "asr", "loss"]


# ---------------------------------------------------------------- metrics

def compute_aas(asr: float, oa: float) -> float:
    """``asr * oa ** asr`` with ``0 ** 0 = 1``."""
    for name, v in (("asr", asr), ("oa", oa)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    if asr == 0.0:
        return 0.0
    return float(asr * oa ** asr)


def compute_asr(model: GnnParams, test_graphs: Sequence[Graph], target_class: int,
                attack: Callable[[Graph], Graph]) -> float:
    """Fraction of non-target test graphs classified as the target after ``attack``."""
    victims = [g for g in test_graphs if g.label != target_class]
    if not victims:
        raise ValueError("no test graphs outside the target class")
    attacked = [attack(g) for g in victims]
    return float(np.mean(predict(model, attacked) == target_class))


@dataclass(frozen=True)
class MetricsRow:
    dataset: str
    N: int
    cm: int
    aggregator: str
    p: float
    f: float
    n_tri: float
    seed: int
    asr: float
    oa: float
    aas: float

    @classmethod
    def of(cls, cfg: ExperimentConfig, seed: int, asr: float, oa: float, dataset: str) -> "MetricsRow":
        return cls(dataset, cfg.num_clients, cfg.num_malicious, cfg.aggregator, cfg.p, cfg.f, cfg.n_tri,
                   seed, asr, oa, compute_aas(asr, oa))

    def values(self) -> list:
        return [repr(v) if isinstance(v, float) else v for v in asdict(self).values()]


def write_results(rows: Sequence[MetricsRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_HEADER)
        for r in rows:
            w.writerow(r.values())
    return path


def read_results(path) -> list[MetricsRow]:
    types = {"N": int, "cm": int, "seed": int, "p": float, "f": float, "n_tri": float,
             "asr": float, "oa": float, "aas": float}
    with Path(path).open(newline="") as fh:
        return [MetricsRow(**{k: types.get(k, str)(v) for k, v in row.items()}) for row in csv.DictReader(fh)]


def write_convergence(rows: Sequence[tuple[str, int, float, float]], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONVERGENCE_HEADER)
        for variant, epoch, asr, loss in rows:
            w.writerow([variant, epoch, repr(float(asr)), repr(float(loss))])
    return path


def write_manifest(cfg: ExperimentConfig, command: str, path) -> Path:
    path = Path(path)
    doc = {"command": command, "config": cfg.to_dict(), "seeds": cfg.seeds}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- data

def load_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    if cfg.dataset == "synthetic":
        spec = SyntheticSpec(2, cfg.graphs_per_class, cfg.min_nodes, cfg.max_nodes, cfg.feature_dim,
                             cfg.feature_sep, cfg.feature_noise, heavy_dims=cfg.heavy_dims,
                             heavy_shift=cfg.heavy_shift, heavy_sigma=cfg.heavy_sigma,
                             seed=substream_seed(seed, "data"))
        return generate_synthetic(spec)
    return load_tu_dataset(cfg.dataset)


def _dataset_for(cfg: ExperimentConfig, seed: int, cache: dict | None) -> Dataset:
    if cache is None:
        return load_dataset(cfg, seed)
    key = (cfg.dataset, cfg.graphs_per_class, cfg.min_nodes, cfg.max_nodes, cfg.feature_dim,
           cfg.feature_sep, cfg.feature_noise, cfg.heavy_dims, cfg.heavy_shift, cfg.heavy_sigma,
           seed if cfg.dataset == "synthetic" else None)
    if key not in cache:
        cache[key] = load_dataset(cfg, seed)
    return cache[key]


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineResult:
    cfg: ExperimentConfig
    seed: int
    dataset: Dataset
    model: GnnParams
    records: list[RoundRecord]
    test_graphs: list[Graph]
    clients: list[Client]
    oa: float
    asr: float = float("nan")
    generators: list[GeneratorParams] = field(default_factory=list)

    @property
    def attackers(self) -> list[ShifterAttacker]:
        return [c.attacker for c in self.clients if isinstance(c, ShifterClient)]

    def row(self) -> MetricsRow:
        return MetricsRow.of(self.cfg, self.seed, self.asr, self.oa, self.dataset.name)


def coalition_range(clients: Sequence[Client]) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension feature range pooled over the malicious clients' data."""
    bad = [g for c in clients if c.role == "malicious" for g in c.graphs]
    return feature_range(bad)


def train_federation(cfg: ExperimentConfig, seed: int, attack: str | None = None,
                     dataset: Dataset | None = None) -> PipelineResult:
    """Data, clients (Stage 1 for shifter attackers) and federated training."""
    attack = cfg.attack if attack is None else attack
    ds = dataset if dataset is not None else load_dataset(cfg, seed)
    if cfg.target_class >= ds.num_classes:
        raise ValueError(f"target_class={cfg.target_class} but the dataset has {ds.num_classes} classes")
    train, test = split_train_test(len(ds), cfg.train_ratio, substream_seed(seed, "split"))
    part = partition_clients(train, cfg.num_clients, substream_seed(seed, "partition"), test)
    arch = Architecture(cfg.model, ds.feature_dim, (cfg.hidden,) * cfg.layers, ds.num_classes)
    init = init_params(arch, substream_seed(seed, "init"))
    cm = cfg.num_malicious if attack != "none" else 0
    shards = [ds.subset(idx) for idx in part.client_indices]
    clients: list[Client] = []
    if attack == "random" and cm:
        lo, hi = feature_range([g for s in shards[:cm] for g in s])
    for cid, graphs in enumerate(shards):
        if cid >= cm:
            clients.append(BenignClient(cid, graphs))
        elif attack == "shifter":
            c_lo, c_hi = feature_range(graphs)
            local = train_local(init, graphs, cfg.pretrain_epochs, cfg.local_lr,
                                substream_seed(seed, "pretrain", cid), cfg.batch_size)
            attacker = ShifterAttacker.prepare(graphs, local, cfg, substream_seed(seed, "attacker", cid),
                                               c_lo, c_hi)
            clients.append(ShifterClient(cid, graphs, attacker, cfg.fl_tune, cfg.tune_epochs,
                                         cfg.recluster_every))
        elif attack == "random":
            clients.append(RandomTriggerClient(cid, graphs, cfg.target_class, cfg.p, cfg.n_tri, cfg.f,
                                               substream_seed(seed, "trigger"), lo, hi,
                                               substream_seed(seed, "trigger-pick")))
        else:
            raise ValueError(f"unknown attack {attack!r}")
    test_graphs = ds.subset(part.test_indices)
    model, records = run_training(cfg, clients, init, test_graphs, seed)
    oa = evaluate_accuracy(model, test_graphs) if test_graphs else float("nan")
    return PipelineResult(cfg, seed, ds, model, records, test_graphs, clients, oa)


def shifter_attack_fn(generators: Sequence[GeneratorParams], settings: AttackSettings,
                      lo: np.ndarray, hi: np.ndarray) -> Callable[[Graph], Graph]:
    def attack(g: Graph) -> Graph:
        shifters = [generate_shifter(gen, g, settings.n_tri, settings.f) for gen in generators]
        return apply_shifter(g, aggregate_perturbations(shifters), lo, hi)
    return attack


def random_attack_fn(cfg: ExperimentConfig, seed: int, lo, hi) -> Callable[[Graph], Graph]:
    trigger_seed = substream_seed(seed, "trigger")

    def attack(g: Graph) -> Graph:
        return apply_shifter(g, random_trigger_baseline(g, cfg.n_tri, cfg.f, trigger_seed, lo, hi), lo, hi)
    return attack


def cold_generator(attacker: ShifterAttacker, cfg: ExperimentConfig) -> GeneratorParams:
    return init_generator(attacker.generator.feature_dim, substream_seed(attacker.seed, "cold"),
                          cfg.generator_hidden, cfg.generator, range_scale(attacker.lo, attacker.hi),
                          zero_output=cfg.cold_init == "zero")


def lockstep_stage2(result: PipelineResult, starts: Sequence[GeneratorParams], epochs: int,
                    on_epoch: Callable[[int, list[GeneratorParams], float], None] | None = None
                    ) -> list[GeneratorParams]:
    """Stage 2 for all attackers side by side against the frozen global model.

    ``on_epoch(epoch, generators, mean_loss)`` runs after every epoch.
    """
    model = result.model
    model_t = as_tensors(model)
    digest = model.digest()
    states = []
    for attacker, start in zip(result.attackers, starts):
        states.append((attacker, start, {k: ad.parameter(v) for k, v in start.tensors.items()}))
    gens = [s.copy() for s in starts]
    for epoch in range(1, epochs + 1):
        losses = []
        for attacker, start, t in states:
            pool = [attacker.graphs[i] for i in attacker.plan.eligible_indices]
            for g in pool:
                losses.append(stage2_step(start, t, model, model_t, g, attacker.target_class,
                                          attacker.settings, attacker.lo, attacker.hi))
        gens = [GeneratorParams(s.kind, s.feature_dim, {k: v.value.copy() for k, v in t.items()}, s.scale.copy())
                for _, s, t in states]
        for g in gens:
            if not g.is_finite():
                raise FloatingPointError("non-finite generator parameters in Stage 2")
        if on_epoch is not None:
            on_epoch(epoch, gens, float(np.mean(losses)) if losses else 0.0)
    if model.digest() != digest:
        monitor.flag("global model changed during Stage 2")
    return gens


def finish_shifter_attack(result: PipelineResult, starts: Sequence[GeneratorParams] | None = None,
                          stage2: bool | None = None) -> PipelineResult:
    cfg = result.cfg
    stage2 = cfg.stage2 if stage2 is None else stage2
    if starts is None:
        if cfg.cold_start:
            starts = [cold_generator(a, cfg) for a in result.attackers]
        else:
            starts = [a.generator for a in result.attackers]
    gens = lockstep_stage2(result, starts, cfg.stage2_epochs) if stage2 else list(starts)
    lo, hi = coalition_range(result.clients)
    result.generators = gens
    result.asr = compute_asr(result.model, result.test_graphs, cfg.target_class,
                             shifter_attack_fn(gens, AttackSettings.from_config(cfg), lo, hi))
    return result


def run_pipeline(cfg: ExperimentConfig, seed: int, attack: str | None = None,
                 dataset: Dataset | None = None) -> PipelineResult:
    """Full run for one seed: setup, federated training, Stage 2 and ASR/OA."""
    attack = cfg.attack if attack is None else attack
    result = train_federation(cfg, seed, attack, dataset)
    if attack == "shifter" and cfg.num_malicious:
        return finish_shifter_attack(result)
    if attack == "random" and cfg.num_malicious:
        lo, hi = coalition_range(result.clients)
        fn = random_attack_fn(cfg, seed, lo, hi)
    else:
        fn = lambda g: g  # noqa: E731 - no attack: clean graphs
    result.asr = compute_asr(result.model, result.test_graphs, cfg.target_class, fn)
    return result


# ---------------------------------------------------------------- drivers

def run_cells(cfg: ExperimentConfig, cells: Sequence[ExperimentConfig], attack: str,
              cache: dict | None = None) -> list[MetricsRow]:
    rows = []
    for cell in cells:
        for seed in cfg.seeds:
            res = run_pipeline(cell, seed, attack, _dataset_for(cell, seed, cache))
            rows.append(res.row())
            log.info("%s N=%d cm=%d %s seed=%d asr=%.3f oa=%.3f", attack, cell.num_clients,
                     cell.num_malicious, cell.aggregator, seed, res.asr, res.oa)
    return rows


def run_q1_style(cfg: ExperimentConfig, attacks: Sequence[str] = ("shifter", "random", "none"),
                 cache: dict | None = None) -> dict[str, list[MetricsRow]]:
    """Fixed number of malicious clients, growing federation (``sweep_clients``)."""
    cells = [cfg.replace(num_clients=n).validate() for n in cfg.sweep_clients]
    return {a: run_cells(cfg, cells, a, cache) for a in attacks}


def run_q2_style(cfg: ExperimentConfig, attacks: Sequence[str] = ("shifter", "random"),
                 cache: dict | None = None) -> dict[str, list[MetricsRow]]:
    """Fixed budget, one cell per aggregation rule (``sweep_aggregators``)."""
    f = cfg.num_malicious
    for agg in cfg.sweep_aggregators:
        need = {"krum": f + 3, "bulyan": 4 * f + 3}.get(agg, 2)
        if cfg.num_clients < need:
            raise ValueError(f"{agg} needs at least {need} clients with {f} malicious; "
                             f"num_clients={cfg.num_clients}")
    cells = [cfg.replace(aggregator=a) for a in cfg.sweep_aggregators]
    return {a: run_cells(cfg, cells, a, cache) for a in attacks}


def epochs_to_target(curve: Sequence[float], target: float) -> int | None:
    """First (1-based) epoch whose ASR reaches ``target``; ``None`` if never."""
    for i, v in enumerate(curve, start=1):
        if v >= target:
            return i
    return None


@dataclass
class ConvergenceResult:
    seed: int
    curves: dict[str, list[tuple[int, float, float]]]   # variant -> (epoch, asr, loss)
    oa: float

    def asr_curve(self, variant: str) -> list[float]:
        return [a for _, a, _ in self.curves[variant]]


Q3_VARIANTS = ("full", "warm", "cold")


def run_q3_style(cfg: ExperimentConfig, seed: int, dataset: Dataset | None = None) -> ConvergenceResult:
    """Stage-2 convergence from three starting points against one frozen model.

    full: generator after Stage 1 and online tuning; warm: Stage-1 snapshot;
    cold: fresh generator with a zero output layer.
    """
    cfg = cfg.replace(fl_tune=True)
    result = train_federation(cfg, seed, "shifter", dataset)
    lo, hi = coalition_range(result.clients)
    settings = AttackSettings.from_config(cfg)
    starts = {"full": [a.generator for a in result.attackers],
              "warm": [a.stage1_snapshot for a in result.attackers],
              "cold": [cold_generator(a, cfg) for a in result.attackers]}
    curves = {}
    for variant in Q3_VARIANTS:
        rows = []

        def record(epoch, gens, loss, rows=rows):
            asr = compute_asr(result.model, result.test_graphs, cfg.target_class,
                              shifter_attack_fn(gens, settings, lo, hi))
            rows.append((epoch, asr, loss))

        lockstep_stage2(result, starts[variant], cfg.stage2_epochs, record)
        curves[variant] = rows
    return ConvergenceResult(seed, curves, result.oa)


ABLATION_VARIANTS = {
    "stage1_only": dict(fl_tune=False, stage2=False),
    "stage1_fl_tune": dict(fl_tune=True, stage2=False),
    "stage1_stage2": dict(fl_tune=False, stage2=True),
    "full": dict(fl_tune=True, stage2=True),
}


def run_ablation(cfg: ExperimentConfig, cache: dict | None = None) -> dict[str, list[MetricsRow]]:
    out = {}
    for name, changes in ABLATION_VARIANTS.items():
        cell = cfg.replace(**changes)
        out[name] = run_cells(cfg, [cell], "shifter", cache)
    return out


def summarize(rows: Sequence[MetricsRow]) -> dict[str, float]:
    asr = np.array([r.asr for r in rows])
    oa = np.array([r.oa for r in rows])
    aas = np.array([r.aas for r in rows])
    return {"asr_mean": float(asr.mean()), "asr_std": float(asr.std()), "oa_mean": float(oa.mean()),
            "oa_std": float(oa.std()), "aas_mean": float(aas.mean()), "aas_std": float(aas.std())}
