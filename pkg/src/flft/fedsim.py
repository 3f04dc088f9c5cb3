"""Round-based federated simulation: sample, broadcast, train locally, aggregate, evaluate."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from flft.arch import DeviceConstraint
from flft.costmodel import TrainingShape
from flft.data import LabeledSet, Shard, sample_batch, sample_labeled
from flft.errors import ConfigError, NumericalError
from flft.nn.engine import cross_entropy, forward
from flft.nn.optim import OptimizerSpec
from flft.nn.store import ParameterStore, replace_head
from flft.selection import SelectionResult, select_architecture
from flft.strategies.schemes import (
    DEFAULT_LEVELS,
    LayerFinetuning,
    Strategy,
    check_update,
    make_strategy,
    predicted_flops,
)

CSV_COLUMNS = ("round", "loss", "acc", "f1_macro", "f1_weak", "upload_cum_B", "flops_cum")


@dataclass(frozen=True)
class FLRunConfig:
    rounds: int = 30
    num_devices: int = 20
    per_round: int = 5
    seed: int = 0
    strategy: str = "layerft"
    levels: tuple = DEFAULT_LEVELS
    baseline_layers: Optional[int] = None  # architecture for non-selecting strategies; default deepest
    shape: TrainingShape = field(default_factory=lambda: TrainingShape(8, 64, 1))
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    eval_every: int = 5
    threads: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 1 <= self.per_round <= self.num_devices:
            raise ConfigError(f"per_round={self.per_round} must lie in [1, num_devices={self.num_devices}]")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    loss: float
    acc: float
    f1: tuple = ()
    f1_weak: float = float("nan")
    upload_cum_B: int = 0
    flops_cum: int = 0

    @property
    def f1_macro(self) -> float:
        return float(np.mean(self.f1)) if self.f1 else float("nan")

    def row(self) -> dict:
        return {
            "round": self.round,
            "loss": _fmt(self.loss),
            "acc": _fmt(self.acc),
            "f1_macro": _fmt(self.f1_macro),
            "f1_weak": _fmt(self.f1_weak),
            "upload_cum_B": self.upload_cum_B,
            "flops_cum": self.flops_cum,
        }


def _fmt(x: float) -> str:
    # round-trippable, so identical runs give identical files
    return repr(float(x))


def metrics_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for rec in records:
        w.writerow(rec.row())
    return buf.getvalue()


# --- metrics ----------------------------------------------------------------------------------


def f1_per_class(predictions, labels, num_classes: int) -> list[float]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"label out of range [0, {num_classes})")
    out = []
    for k in range(num_classes):
        tp = int(np.sum((predictions == k) & (labels == k)))
        fp = int(np.sum((predictions == k) & (labels != k)))
        fn = int(np.sum((predictions != k) & (labels == k)))
        # 2PR/(P+R) == 2tp/(2tp+fp+fn); zero when precision and recall are both zero
        out.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
    return out


def weak_weighted_f1(f1: Sequence[float], p_weak: Sequence[float]) -> float:
    p = np.asarray(p_weak, dtype=np.float64)
    if len(p) != len(f1):
        raise ConfigError("weight vector and F1 list differ in length")
    if abs(p.sum() - 1.0) > 1e-9 or (p < 0).any():
        raise ConfigError("weak class distribution must be a probability vector")
    return float(np.dot(p, f1))


def evaluate_next_token(store: ParameterStore, inputs: np.ndarray, targets: np.ndarray, chunk: int = 64):
    """Mean token cross-entropy and per-token top-1 accuracy of the final exit."""
    if len(inputs) == 0:
        raise ConfigError("empty evaluation set")
    loss_sum, hits, count = 0.0, 0, 0
    for s in range(0, len(inputs), chunk):
        x, y = inputs[s:s + chunk], targets[s:s + chunk]
        out, _ = forward(store, x)
        lg = out[max(out)]
        loss, _ = cross_entropy(lg, y)
        loss_sum += loss * y.size
        hits += int(np.sum(lg.argmax(-1) == y))
        count += y.size
    return loss_sum / count, hits / count


def evaluate_classification(store: ParameterStore, data: LabeledSet, chunk: int = 256):
    """Cross-entropy, accuracy and predictions read at the last position of each sequence."""
    if len(data) == 0:
        raise ConfigError("empty evaluation set")
    preds, loss_sum = [], 0.0
    for s in range(0, len(data), chunk):
        x = data.inputs[s:s + chunk]
        out, _ = forward(store, x)
        last = out[max(out)][:, -1, :]
        loss, _ = cross_entropy(last, data.labels[s:s + chunk])
        loss_sum += loss * len(x)
        preds.append(last.argmax(-1))
    preds = np.concatenate(preds)
    return loss_sum / len(data), float(np.mean(preds == data.labels)), preds


# --- tasks ------------------------------------------------------------------------------------


@dataclass
class LanguageTask:
    shards: list  # Shard per device
    eval_inputs: np.ndarray
    eval_targets: np.ndarray
    num_outputs: Optional[int] = None

    def sampler(self, device: int, shape: TrainingShape):
        tokens = self.shards[device].tokens
        return lambda rng: sample_batch(tokens, shape.batch, shape.context, rng)

    def has_data(self, device: int) -> bool:
        return len(self.shards[device]) > 0

    def evaluate(self, store):
        loss, acc = evaluate_next_token(store, self.eval_inputs, self.eval_targets)
        return MetricsRecord(0, loss, acc)


@dataclass
class ClassificationTask:
    data: LabeledSet
    shards: list
    eval_set: LabeledSet
    p_weak: Optional[np.ndarray] = None

    @property
    def num_outputs(self) -> int:
        return self.data.num_classes

    def sampler(self, device: int, shape: TrainingShape):
        idx = self.shards[device].indices
        return lambda rng: sample_labeled(self.data, idx, shape.batch, rng)

    def has_data(self, device: int) -> bool:
        return len(self.shards[device]) > 0

    def evaluate(self, store):
        loss, acc, preds = evaluate_classification(store, self.eval_set)
        f1 = f1_per_class(preds, self.eval_set.labels, self.data.num_classes)
        weak = weak_weighted_f1(f1, self.p_weak) if self.p_weak is not None else float("nan")
        return MetricsRecord(0, loss, acc, tuple(f1), weak)


# --- orchestration ----------------------------------------------------------------------------


def sample_devices(r: int, num_devices: int, per_round: int, seed: int) -> np.ndarray:
    """Uniform sample without replacement, seeded by (seed, round); returned sorted."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, r, 0x5A]))
    return np.sort(rng.choice(num_devices, size=per_round, replace=False))


def client_rng(seed: int, r: int, client: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, r, client, 0xC1]))


@dataclass
class RunResult:
    metrics: list
    final: ParameterStore
    strategy: Strategy
    selection: Optional[SelectionResult] = None
    skipped: int = 0  # sampled devices that could not train (no feasible knob or no data)
    upload_total: int = 0
    flops_total: int = 0
    predicted_upload: int = 0
    predicted_flops: int = 0

    def summary(self) -> dict:
        last = self.metrics[-1]
        out = {
            "strategy": self.strategy.name,
            "layers": self.strategy.arch.layers,
            "final_loss": last.loss,
            "final_acc": last.acc,
            "initial_loss": self.metrics[0].loss,
            "final_f1_macro": None if np.isnan(last.f1_macro) else last.f1_macro,
            "final_f1_weak": None if np.isnan(last.f1_weak) else last.f1_weak,
            "upload_cum_B": last.upload_cum_B,
            "flops_cum": last.flops_cum,
            "skipped_client_rounds": self.skipped,
            "knobs": [p.knob for p in self.strategy.plans],
        }
        if self.selection is not None:
            out["selected_arch_index"] = self.selection.arch_index
            out["avg_trained_layers"] = self.selection.avg_trained
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _choose(config: FLRunConfig, stores: Sequence[ParameterStore], devices):
    archs = [s.arch for s in stores]
    if config.strategy == "layerft":
        sel = select_architecture(archs, devices, config.shape)
        strategy = LayerFinetuning(sel.arch, config.shape, sel.trained_layers)
        strategy.plan(devices)
        return stores[sel.arch_index], strategy, sel
    if config.baseline_layers is None:
        idx = max(range(len(archs)), key=lambda i: (archs[i].layers, -i))
    else:
        matches = [i for i, a in enumerate(archs) if a.layers == config.baseline_layers]
        if not matches:
            raise ConfigError(f"baseline_layers={config.baseline_layers} not among the checkpoints")
        idx = matches[0]
    strategy = make_strategy(config.strategy, archs[idx], config.shape, config.levels)
    strategy.plan(devices)
    return stores[idx], strategy, None


def run_experiment(
    config: FLRunConfig,
    stores: Sequence[ParameterStore],
    devices: Sequence[DeviceConstraint],
    task,
    log=None,
) -> RunResult:
    """Execute ``config.rounds`` rounds; metrics at round 0, every ``eval_every`` rounds and at the end."""
    if len(devices) != config.num_devices:
        raise ConfigError(f"{len(devices)} device constraints for num_devices={config.num_devices}")
    if len(task.shards) != config.num_devices:
        raise ConfigError(f"{len(task.shards)} shards for num_devices={config.num_devices}")
    if not stores:
        raise ConfigError("no pretrained checkpoints given")
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1A]))
    if task.num_outputs is not None:
        stores = [
            s if s.arch.out_dim == task.num_outputs else replace_head(s, task.num_outputs, init_rng)
            for s in stores
        ]
    for s in stores:
        if config.shape.context > s.arch.context:
            raise ConfigError(f"context {config.shape.context} exceeds the model context {s.arch.context}")
    store, strategy, selection = _choose(config, stores, devices)
    opt = replace(config.optimizer, horizon=config.rounds)
    global_store = strategy.prepare_global(store, init_rng)

    def measure(r, up, fl):
        rec = task.evaluate(strategy.eval_store(global_store))
        if not np.isfinite(rec.loss):
            raise NumericalError(f"non-finite evaluation loss at round {r}")
        rec = replace(rec, round=r, upload_cum_B=up, flops_cum=fl)
        if log:
            log(f"round {r:4d}  loss {rec.loss:.4f}  acc {rec.acc:.4f}")
        return rec

    upload_cum = flops_cum = skipped = 0
    pred_up = pred_fl = 0
    metrics = [measure(0, 0, 0)]
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for r in range(config.rounds):
            sampled = sample_devices(r, config.num_devices, config.per_round, config.seed)
            active = [int(c) for c in sampled if strategy.plans[c].knob is not None and task.has_data(c)]
            skipped += len(sampled) - len(active)
            lr = opt.lr(r)
            if active:
                strategy.begin_round(r, global_store, active)
                snapshot = global_store

                def work(c, r=r, lr=lr, snapshot=snapshot):
                    return strategy.local_train(
                        snapshot, strategy.plans[c], r, task.sampler(c, config.shape),
                        client_rng(config.seed, r, c), opt, lr,
                    )

                updates = list(pool.map(work, active)) if pool else [work(c) for c in active]
                for u in updates:
                    if not np.isfinite(u.loss):
                        raise NumericalError(f"client {u.client} diverged in round {r}")
                    check_update(strategy, u, devices[u.client])
                    upload_cum += u.upload_bytes
                    flops_cum += u.flops
                    pred_up += strategy.plans[u.client].cost.upload_bytes
                    pred_fl += predicted_flops(strategy, u)
                global_store = strategy.aggregate(global_store, updates, len(updates), r)
            if (r + 1) % config.eval_every == 0 or r + 1 == config.rounds:
                metrics.append(measure(r + 1, upload_cum, flops_cum))
    finally:
        if pool:
            pool.shutdown()
    return RunResult(
        metrics, global_store, strategy, selection, skipped, upload_cum, flops_cum, pred_up, pred_fl
    )
