"""Experiment configuration files.

Grammar: INI sections of ``key = value`` lines (``#`` or ``;`` comments).
Lists are comma separated. Budgets use explicit units: ``memory_MB`` and
``upload_MB`` (10^6 bytes) and ``gflops`` (10^9 FLOPs per round); an empty
value or ``inf`` means unbounded. Every section and key is optional except
the groups named in ``[scenario] groups``; unknown sections or keys are
rejected. Relative paths resolve against the config file's directory.

    [experiment]  name, seeds, output
    [model]       layers, embed_dim, heads, ffn_mult, vocab, context, checkpoint_dir
    [pretrain]    corpus, steps, batch, lr, lr_end, warmup, weight_decay, dropout, eval_fraction, log_every
    [strategy]    name, levels, baseline_layers
    [scenario]    groups
    [group.NAME]  fraction, memory_MB, upload_MB, gflops
    [data]        task, corpus, eval_fraction, eval_windows, partition, alpha, leak,
                  classes, per_class, eval_per_class, length, signal
    [federated]   rounds, devices, per_round, batch, context, steps_per_round,
                  lr, lr_end, weight_decay, eval_every, threads
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from flft.arch import ArchitectureDescriptor, ConstraintScenario, DeviceConstraint, sibling_family
from flft.costmodel import TrainingShape
from flft.errors import ConfigError
from flft.fedsim import FLRunConfig
from flft.nn.optim import OptimizerSpec
from flft.pretrain import PretrainConfig
from flft.strategies.schemes import DEFAULT_LEVELS, STRATEGIES

MB = 1_000_000
GFLOP = 1_000_000_000

_SCHEMA = {
    "experiment": {"name": str, "seeds": "ints", "output": "path"},
    "model": {
        "layers": "ints", "embed_dim": int, "heads": int, "ffn_mult": int,
        "vocab": int, "context": int, "checkpoint_dir": "path",
    },
    "pretrain": {
        "corpus": str, "steps": int, "batch": int, "lr": float, "lr_end": float, "warmup": int,
        "weight_decay": float, "dropout": float, "eval_fraction": float, "log_every": int,
    },
    "strategy": {"name": str, "levels": "floats", "baseline_layers": int},
    "scenario": {"groups": "strs"},
    "group": {"fraction": float, "memory_MB": "budget", "upload_MB": "budget", "gflops": "budget"},
    "data": {
        "task": str, "corpus": str, "eval_fraction": float, "eval_windows": int, "partition": str,
        "alpha": float, "leak": float, "classes": int, "per_class": int, "eval_per_class": int,
        "length": int, "signal": float,
    },
    "federated": {
        "rounds": int, "devices": int, "per_round": int, "batch": int, "context": int,
        "steps_per_round": int, "lr": float, "lr_end": float, "weight_decay": float,
        "eval_every": int, "threads": int,
    },
}


@dataclass
class DataSpec:
    task: str = "language"  # language | classification
    corpus: str = "shakespeare"
    eval_fraction: float = 0.1
    eval_windows: int = 64
    partition: str = "equal"
    alpha: float = 0.1
    leak: float = 0.05
    classes: int = 8
    per_class: int = 400
    eval_per_class: int = 100
    length: int = 32
    signal: float = 0.5


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seeds: list = field(default_factory=lambda: [0])
    output: Path = Path("runs")
    archs: list = field(default_factory=list)
    checkpoint_dir: Path = Path("checkpoints")
    pretrain_corpus: str = "britannica"
    pretrain_eval_fraction: float = 0.05
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    strategy: str = "layerft"
    levels: tuple = DEFAULT_LEVELS
    baseline_layers: Optional[int] = None
    scenario: Optional[ConstraintScenario] = None
    data: DataSpec = field(default_factory=DataSpec)
    federated: dict = field(default_factory=dict)

    def checkpoint_path(self, arch: ArchitectureDescriptor) -> Path:
        return self.checkpoint_dir / f"l{arch.layers}_d{arch.embed_dim}.flft"

    def fl_config(self, seed: int, threads: Optional[int] = None) -> FLRunConfig:
        f = dict(self.federated)
        shape = TrainingShape(f.pop("batch", 8), f.pop("context", 64), f.pop("steps_per_round", 1))
        opt = OptimizerSpec(
            lr_start=f.pop("lr", 1e-3), lr_end=f.pop("lr_end", 1e-4),
            weight_decay=f.pop("weight_decay", 0.1),
        )
        cfg_threads = f.pop("threads", 1)
        return FLRunConfig(
            rounds=f.pop("rounds", 30),
            num_devices=f.pop("devices", 20),
            per_round=f.pop("per_round", 5),
            seed=seed,
            strategy=self.strategy,
            levels=self.levels,
            baseline_layers=self.baseline_layers,
            shape=shape,
            optimizer=opt,
            eval_every=f.pop("eval_every", 5),
            threads=threads if threads is not None else cfg_threads,
        )

    @property
    def num_devices(self) -> int:
        return self.federated.get("devices", 20)


def _convert(section: str, key: str, kind, raw: str, base: Path):
    raw = raw.strip()
    try:
        if kind is str:
            return raw
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "path":
            p = Path(raw).expanduser()
            return p if p.is_absolute() else base / p
        if kind == "ints":
            return [int(x) for x in raw.split(",") if x.strip()]
        if kind == "floats":
            return [float(x) for x in raw.split(",") if x.strip()]
        if kind == "strs":
            return [x.strip() for x in raw.split(",") if x.strip()]
        if kind == "budget":
            if raw == "" or raw.lower() in ("inf", "none", "unbounded"):
                return None
            value = float(raw)
            if math.isnan(value) or value < 0:
                raise ValueError("negative budget")
            return value
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc
    raise AssertionError(kind)


def parse_config(text: str, base: Path = Path(".")) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case (memory_MB)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values: dict = {}
    for section in parser.sections():
        kind = "group" if section.startswith("group.") else section
        if kind not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[kind]:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            values[section][key] = _convert(section, key, _SCHEMA[kind][key], raw, base)
    return _build(values, base)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def _build(v: dict, base: Path) -> ExperimentConfig:
    exp = v.get("experiment", {})
    model = v.get("model", {})
    cfg = ExperimentConfig()
    cfg.name = exp.get("name", cfg.name)
    if not cfg.name or any(c in cfg.name for c in "/\\"):
        raise ConfigError("[experiment] name: must be a non-empty file-name-safe string")
    cfg.seeds = exp.get("seeds", cfg.seeds)
    if not cfg.seeds:
        raise ConfigError("[experiment] seeds: at least one seed required")
    cfg.output = exp.get("output", base / "runs")
    cfg.checkpoint_dir = model.get("checkpoint_dir", base / "checkpoints")
    layers = model.get("layers", [2, 3, 4])
    if not layers:
        raise ConfigError("[model] layers: at least one architecture required")
    try:
        proto = ArchitectureDescriptor(
            layers=layers[0],
            embed_dim=model.get("embed_dim", 32),
            heads=model.get("heads", 4),
            ffn_mult=model.get("ffn_mult", 4),
            vocab=model.get("vocab", 128),
            context=model.get("context", 64),
        )
        cfg.archs = sibling_family(proto, layers)
    except ConfigError as exc:
        raise ConfigError(f"[model] {exc}") from exc

    pre = dict(v.get("pretrain", {}))
    cfg.pretrain_corpus = pre.pop("corpus", cfg.pretrain_corpus)
    cfg.pretrain_eval_fraction = pre.pop("eval_fraction", cfg.pretrain_eval_fraction)
    try:
        cfg.pretrain = PretrainConfig(**pre)
    except ConfigError as exc:
        raise ConfigError(f"[pretrain] {exc}") from exc

    strat = v.get("strategy", {})
    cfg.strategy = strat.get("name", cfg.strategy)
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"[strategy] name: {cfg.strategy!r} is not one of {', '.join(STRATEGIES)}")
    levels = strat.get("levels", list(DEFAULT_LEVELS))
    if not levels or any(not 0 < s <= 1 for s in levels):
        raise ConfigError("[strategy] levels: values must lie in (0, 1]")
    cfg.levels = tuple(levels)
    cfg.baseline_layers = strat.get("baseline_layers")

    cfg.federated = dict(v.get("federated", {}))
    data = DataSpec(**v.get("data", {}))
    if data.task not in ("language", "classification"):
        raise ConfigError(f"[data] task: {data.task!r} must be language or classification")
    if data.partition not in ("equal", "dirichlet", "constraint_correlated"):
        raise ConfigError(f"[data] partition: unknown mode {data.partition!r}")
    if data.task == "language" and data.partition != "equal":
        raise ConfigError("[data] partition: the language task supports only equal shares")
    if data.task == "classification" and data.partition == "equal":
        data.partition = "dirichlet"
    cfg.data = data

    names = v.get("scenario", {}).get("groups")
    group_sections = [s for s in v if s.startswith("group.")]
    if names is None:
        if group_sections:
            raise ConfigError("[scenario] groups: missing while group sections are present")
        cfg.scenario = ConstraintScenario(((1.0, DeviceConstraint()),), cfg.num_devices, ("all",))
    else:
        extra = set(group_sections) - {f"group.{n}" for n in names}
        if extra:
            raise ConfigError(f"section [{sorted(extra)[0]}] is not listed in [scenario] groups")
        groups = []
        for n in names:
            g = v.get(f"group.{n}")
            if g is None:
                raise ConfigError(f"[scenario] groups: missing section [group.{n}]")
            if "fraction" not in g:
                raise ConfigError(f"[group.{n}] fraction: required")
            mem, up, gf = g.get("memory_MB"), g.get("upload_MB"), g.get("gflops")
            groups.append((g["fraction"], DeviceConstraint(
                None if mem is None else mem * MB,
                None if up is None else up * MB,
                None if gf is None else gf * GFLOP,
            )))
        try:
            cfg.scenario = ConstraintScenario(tuple(groups), cfg.num_devices, tuple(names))
        except ConfigError as exc:
            raise ConfigError(f"[scenario] {exc}") from exc
    try:
        cfg.fl_config(cfg.seeds[0])
    except ConfigError as exc:
        raise ConfigError(f"[federated] {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"[federated] {exc}") from exc
    return cfg
