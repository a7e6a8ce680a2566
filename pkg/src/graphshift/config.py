"""Experiment configuration: a flat ``key = value`` text format.

Lines are ``key = value``; ``#`` starts a comment. Keys mirror the fields
of :class:`ExperimentConfig`; list-valued keys take comma-separated items.
A JSON run-manifest (as written by the CLI) is also accepted.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

AGGREGATORS = ("fedavg", "krum", "bulyan", "foolsgold")
ATTACKS = ("shifter", "random", "none")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "synthetic"          # "synthetic" or a TU dataset directory
    graphs_per_class: int = 100
    min_nodes: int = 10
    max_nodes: int = 20
    feature_dim: int = 8
    feature_sep: float = 0.25
    feature_noise: float = 1.0
    heavy_dims: int = 1
    heavy_shift: float = 1.0
    heavy_sigma: float = 1.0
    train_ratio: float = 0.8
    # federation
    num_clients: int = 10
    num_malicious: int = 2
    rounds: int = 40
    aggregator: str = "fedavg"
    weighted_fedavg: bool = False
    model: str = "gat"
    hidden: int = 16
    layers: int = 2
    local_epochs: int = 1
    local_lr: float = 0.1
    batch_size: int = 32
    pretrain_epochs: int = 100
    # attack
    attack: str = "shifter"
    target_class: int = 1
    p: float = 0.1
    f: float = 0.1
    n_tri: float = 0.1
    k: int = 3
    lambda_dist: float = 1.0
    lambda_homo: float = 0.1
    lambda_ce: float = 0.5
    tau: float = 0.5
    eta: float = 0.01
    stage1_epochs: int = 30
    tune_epochs: int = 1
    recluster_every: int = 5
    stage2_epochs: int = 30
    stage2_eta: float = 0.05
    fl_tune: bool = True
    stage2: bool = True
    cold_start: bool = False
    cold_init: str = "zero"             # "zero" (output layer zeroed) or "random"
    generator: str = "mlp"
    generator_hidden: int = 32
    straight_through_mask: bool = False
    kmeans_iters: int = 100
    asr_target: float = 0.8
    # experiment grid
    seed: int = 0
    repeats: int = 5
    sweep_clients: tuple[int, ...] = (10, 20, 40)
    sweep_aggregators: tuple[str, ...] = AGGREGATORS

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repeats)]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def problems(self) -> list[str]:
        """Every violated constraint, empty when the configuration is valid."""
        out = []

        def need(cond: bool, msg: str):
            if not cond:
                out.append(msg)

        for name in ("p", "f", "n_tri"):
            v = getattr(self, name)
            need(0 < v <= 1, f"{name}={v} must lie in (0, 1]")
        need(0 < self.train_ratio < 1, f"train_ratio={self.train_ratio} must lie in (0, 1)")
        need(self.num_clients >= 2, f"num_clients={self.num_clients} must be >= 2")
        need(0 <= self.num_malicious < self.num_clients,
             f"num_malicious={self.num_malicious} must satisfy 0 <= cm < num_clients={self.num_clients}")
        need(self.rounds >= 0, f"rounds={self.rounds} must be >= 0")
        need(self.aggregator in AGGREGATORS, f"aggregator={self.aggregator!r} not in {AGGREGATORS}")
        need(self.attack in ATTACKS, f"attack={self.attack!r} not in {ATTACKS}")
        need(self.model in ("gcn", "gat"), f"model={self.model!r} must be 'gcn' or 'gat'")
        need(self.cold_init in ("zero", "random"), f"cold_init={self.cold_init!r} must be 'zero' or 'random'")
        need(self.generator in ("mlp", "gcn"), f"generator={self.generator!r} must be 'mlp' or 'gcn'")
        need(self.target_class >= 0, f"target_class={self.target_class} must be >= 0")
        need(self.k >= 1, f"k={self.k} must be >= 1")
        need(self.hidden >= 1 and self.layers >= 1, "hidden and layers must be >= 1")
        need(self.graphs_per_class >= 1, "graphs_per_class must be >= 1")
        need(4 <= self.min_nodes <= self.max_nodes, f"node range [{self.min_nodes}, {self.max_nodes}] invalid")
        need(self.feature_dim >= 4, f"feature_dim={self.feature_dim} must be >= 4")
        need(0 <= self.heavy_dims <= self.feature_dim,
             f"heavy_dims={self.heavy_dims} must lie in [0, feature_dim={self.feature_dim}]")
        need(self.heavy_sigma > 0, f"heavy_sigma={self.heavy_sigma} must be positive")
        for name in ("local_lr", "eta", "stage2_eta"):
            need(getattr(self, name) > 0, f"{name} must be positive")
        for name in ("local_epochs", "pretrain_epochs", "stage1_epochs", "tune_epochs",
                     "stage2_epochs", "kmeans_iters", "batch_size", "recluster_every"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(self.recluster_every >= 1, "recluster_every must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.tau <= 1, f"tau={self.tau} must be <= 1 (cosine similarity bound)")
        need(0 < self.asr_target <= 1, f"asr_target={self.asr_target} must lie in (0, 1]")
        need(self.repeats >= 1, "repeats must be >= 1")
        need(all(n >= 2 for n in self.sweep_clients), "sweep_clients entries must be >= 2")
        need(all(a in AGGREGATORS for a in self.sweep_aggregators),
             f"sweep_aggregators must be drawn from {AGGREGATORS}")
        return out

    def validate(self) -> "ExperimentConfig":
        probs = self.problems()
        if probs:
            raise ConfigError(probs)
        return self


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, raw, problems: list[str]):
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("true", "1", "yes", "on"):
                return True
            if s in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (list, tuple)) else [x for x in str(raw).split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(x.strip()) if isinstance(x, str) else kind(x) for x in items)
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(str(raw).strip()) if not isinstance(raw, (int, float)) else int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        problems.append(f"{key}={raw!r} is not a valid {type(default).__name__}")
        return default


def from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    problems = []
    changes = {}
    for key, raw in values.items():
        if key not in _FIELDS:
            problems.append(f"unknown key {key!r}")
            continue
        changes[key] = _coerce(key, raw, problems)
    if problems:
        raise ConfigError(problems)
    return (base or ExperimentConfig()).replace(**changes)


def parse_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected 'key = value', got {line!r}"])
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a config file (or manifest), apply overrides, validate."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            doc = json.loads(text)
            values = dict(doc.get("config", doc))
        else:
            values = parse_text(text)
    values.update(overrides or {})
    return from_mapping(values).validate()


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError([f"override {pair!r} is not key=value"])
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def dump_text(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
