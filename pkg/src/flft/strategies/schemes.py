"""Per-scheme client planning, local training and aggregation.

A strategy first assigns every device its knob (trained depth, adapter rank,
width level, factor rank or exit set) from the cost model, then per round
turns the broadcast global model into a client replica, trains it and merges
the returned payloads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from flft.arch import ArchitectureDescriptor, DeviceConstraint, TrainingConfiguration
from flft.costmodel import (
    ResourceCost,
    TrainingShape,
    depthfl_cost,
    layerft_cost,
    lora_cost,
    lowrank_cost,
    scaled_dim,
    subset_cost,
)
from flft.errors import ConfigError, FlftError, InfeasibleError
from flft.nn.engine import Counters, loss_and_grads
from flft.nn.optim import AdamWState, OptimizerSpec, adamw_step
from flft.nn.store import ParameterStore, layer_prefix
from flft.nn.variants import (
    SubsetSpec,
    add_exit_heads,
    add_lora,
    factorize_store,
    lora_trainable,
    slice_lora,
    store_svds,
    subset_embed,
    subset_extract,
    truncate_to_depth,
)
from flft.strategies.aggregate import (
    ClientUpdate,
    aggregate_depthfl,
    aggregate_fedhm,
    aggregate_hetlora,
    aggregate_layerft,
    aggregate_subset,
)
from flft.strategies.indexing import fedrolex_index_set, fjord_sample_levels, heterofl_index_set

Sampler = Callable[[np.random.Generator], tuple]

DEFAULT_LEVELS = (0.125, 0.25, 0.5, 1.0)
FULL_RANK = "full"


@dataclass(frozen=True)
class ClientPlan:
    device: int
    knob: object  # None means the device cannot participate
    cost: Optional[ResourceCost]


def _trainable_dense(store: ParameterStore) -> list[str]:
    return [n for n in store if not n.startswith("emb.")]


def _train(store, trainable, sampler, steps, opt, lr, rng, exits=None):
    """Local mini-batch loop with a fresh optimizer state; returns (mean loss, FLOPs executed)."""
    if steps < 1:
        raise ConfigError("steps_per_round must be >= 1")
    ctr = Counters(store.arch.scalar_bytes)
    state = AdamWState.fresh(store, trainable)
    total = 0.0
    for _ in range(steps):
        x, y = sampler(rng)
        loss, grads = loss_and_grads(store, x, y, trainable, exits=exits, counters=ctr)
        adamw_step(store, grads, state, opt, lr)
        total += loss
    return total / steps, ctr.flops


def _shallow(store: ParameterStore) -> ParameterStore:
    # optimizer steps rebind tensors instead of writing in place, so sharing arrays is safe
    return ParameterStore(store.arch, dict(store.tensors))


class Strategy:
    name = "base"

    def __init__(self, arch: ArchitectureDescriptor, shape: TrainingShape):
        self.arch = arch
        self.shape = shape
        self.plans: list[ClientPlan] = []

    # planning ----------------------------------------------------------------------------------

    def knob_cost(self, knob) -> ResourceCost:
        raise NotImplementedError

    def choose_knob(self, device: DeviceConstraint):
        raise NotImplementedError

    def plan(self, devices: Sequence[DeviceConstraint]) -> list[ClientPlan]:
        plans = []
        for i, c in enumerate(devices):
            knob = self.choose_knob(c)
            plans.append(ClientPlan(i, knob, None if knob is None else self.knob_cost(knob)))
        if all(p.knob is None for p in plans):
            raise InfeasibleError(f"{self.name}: no device can train under its budget")
        self.plans = plans
        return plans

    # rounds ------------------------------------------------------------------------------------

    def prepare_global(self, store: ParameterStore, rng: np.random.Generator) -> ParameterStore:
        return store

    def begin_round(self, r: int, global_store: ParameterStore, participants: Sequence[int]):
        pass

    def local_train(self, global_store, plan: ClientPlan, r, sampler, rng, opt: OptimizerSpec, lr) -> ClientUpdate:
        raise NotImplementedError

    def aggregate(self, global_store, updates, n, r) -> ParameterStore:
        raise NotImplementedError

    def eval_store(self, global_store: ParameterStore) -> ParameterStore:
        return global_store


def _max_feasible(candidates, cost_fn, device):
    best = None
    for k in candidates:
        try:
            cost = cost_fn(k)
        except ConfigError:
            continue
        if device.admits(cost):
            best = k
    return best


class LayerFinetuning(Strategy):
    """Train the last ``t`` layers and the head; ``t`` per device comes from selection."""

    name = "layerft"

    def __init__(self, arch, shape, depths: Optional[Sequence[int]] = None):
        super().__init__(arch, shape)
        self.depths = depths

    def knob_cost(self, t):
        return layerft_cost(TrainingConfiguration(self.arch, t), self.shape)

    def choose_knob(self, device):
        return _max_feasible(range(1, self.arch.layers + 1), self.knob_cost, device)

    def plan(self, devices):
        if self.depths is None:
            return super().plan(devices)
        if len(self.depths) != len(devices):
            raise ConfigError("one trained depth per device required")
        self.plans = [ClientPlan(i, t, self.knob_cost(t)) for i, t in enumerate(self.depths)]
        return self.plans

    @staticmethod
    def trainable_names(store: ParameterStore, t: int) -> list[str]:
        first = store.arch.layers - t
        keep = {layer_prefix(i) for i in range(first, store.arch.layers)}
        return [
            n for n in store
            if n.startswith("head.") or (n.startswith("layers.") and n[: n.index(".", 7) + 1] in keep)
        ]

    def local_train(self, global_store, plan, r, sampler, rng, opt, lr):
        store = _shallow(global_store)
        names = self.trainable_names(store, plan.knob)
        loss, flops = _train(store, names, sampler, self.shape.steps_per_round, opt, lr, rng)
        return ClientUpdate(plan.device, r, {n: store[n] for n in names}, plan.knob, loss=loss, flops=flops)

    def aggregate(self, global_store, updates, n, r):
        return aggregate_layerft(global_store, updates, n, r)


class HeteroLoRA(Strategy):
    """Rank-heterogeneous adapters on frozen matrices; norms and head train too."""

    name = "lora"

    def knob_cost(self, z):
        return lora_cost(self.arch, z, self.shape)

    def choose_knob(self, device):
        return _max_feasible(range(1, self.arch.embed_dim + 1), self.knob_cost, device)

    def prepare_global(self, store, rng):
        top = max(p.knob for p in self.plans if p.knob is not None)
        return add_lora(store, top, rng)

    def local_train(self, global_store, plan, r, sampler, rng, opt, lr):
        store = slice_lora(global_store, plan.knob)
        names = lora_trainable(store)
        loss, flops = _train(store, names, sampler, self.shape.steps_per_round, opt, lr, rng)
        return ClientUpdate(plan.device, r, {n: store[n] for n in names}, plan.knob, loss=loss, flops=flops)

    def aggregate(self, global_store, updates, n, r):
        return aggregate_hetlora(global_store, updates, n, r)


class SubsetTraining(Strategy):
    """Width sub-models: HeteroFL fixed prefixes, FedRolex rolling windows, FjORD per-batch levels."""

    def __init__(self, arch, shape, mode: str = "heterofl", levels: Sequence[float] = DEFAULT_LEVELS):
        super().__init__(arch, shape)
        if mode not in ("heterofl", "fedrolex", "fjord"):
            raise ConfigError(f"unknown subset mode {mode!r}")
        if not levels or any(not 0 < s <= 1 for s in levels):
            raise ConfigError(f"levels must lie in (0, 1], got {list(levels)}")
        self.mode = mode
        self.name = mode
        # a level too narrow to give every head one dimension has no realizable sub-model
        usable = {float(s) for s in levels if scaled_dim(s, arch.embed_dim) >= arch.heads}
        if not usable:
            raise ConfigError(f"no level in {list(levels)} keeps {arch.heads} heads at width {arch.embed_dim}")
        self.levels = tuple(sorted(usable))

    def knob_cost(self, s):
        return subset_cost(self.arch, s, self.shape)

    def choose_knob(self, device):
        return _max_feasible(self.levels, self.knob_cost, device)

    def plan(self, devices):
        plans = super().plan(devices)
        if any(p.knob is None for p in plans):
            raise InfeasibleError(f"{self.name}: some device cannot afford the smallest width level")
        return plans

    def spec(self, s: float, r: int) -> SubsetSpec:
        d, hid = self.arch.embed_dim, self.arch.hidden
        if self.mode == "fedrolex":
            return SubsetSpec(s, fedrolex_index_set(r, s, d), fedrolex_index_set(r, s, hid))
        return SubsetSpec(s, heterofl_index_set(s, d), heterofl_index_set(s, hid))

    def local_train(self, global_store, plan, r, sampler, rng, opt, lr):
        spec = self.spec(plan.knob, r)
        store = subset_extract(global_store, spec)
        names = _trainable_dense(store)
        trace = ()
        if self.mode != "fjord":
            loss, flops = _train(store, names, sampler, self.shape.steps_per_round, opt, lr, rng)
        else:
            store, loss, flops, trace = self._train_fjord(store, names, plan.knob, sampler, opt, lr, rng)
        return ClientUpdate(
            plan.device, r, {n: store[n] for n in names}, plan.knob, subset=spec,
            loss=loss, flops=flops, trace=trace,
        )

    def _train_fjord(self, store, names, s_max, sampler, opt, lr, rng):
        steps = self.shape.steps_per_round
        if steps < 1:
            raise ConfigError("steps_per_round must be >= 1")
        state = AdamWState.fresh(store, names)
        d, hid = self.arch.embed_dim, self.arch.hidden
        ctr = Counters(store.arch.scalar_bytes)
        total = 0.0
        trace = []
        for _ in range(steps):
            s = fjord_sample_levels(self.levels, s_max, rng)
            trace.append(s)
            inner = SubsetSpec(s, np.arange(scaled_dim(s, d)), np.arange(scaled_dim(s, hid)))
            sub = subset_extract(store, inner)
            sub_state = AdamWState(
                subset_extract(ParameterStore(store.arch, state.m), inner).tensors,
                subset_extract(ParameterStore(store.arch, state.v), inner).tensors,
                state.step,
            )
            x, y = sampler(rng)
            loss, grads = loss_and_grads(sub, x, y, names, counters=ctr)
            adamw_step(sub, grads, sub_state, opt, lr)
            store = subset_embed(sub, store, inner)
            state.m = subset_embed(ParameterStore(store.arch, sub_state.m), ParameterStore(store.arch, state.m), inner).tensors
            state.v = subset_embed(ParameterStore(store.arch, sub_state.v), ParameterStore(store.arch, state.v), inner).tensors
            state.step = sub_state.step
            total += loss
        return store, total / steps, ctr.flops, tuple(trace)

    def aggregate(self, global_store, updates, n, r):
        return aggregate_subset(global_store, updates, n, r)


class FedHM(Strategy):
    """Truncated-SVD factor training; devices that can afford dense training skip factorization."""

    name = "fedhm"

    def knob_cost(self, z):
        if z == FULL_RANK:
            return subset_cost(self.arch, 1.0, self.shape)
        return lowrank_cost(self.arch, z, self.shape)

    def choose_knob(self, device):
        if device.admits(self.knob_cost(FULL_RANK)):
            return FULL_RANK
        return _max_feasible(range(1, self.arch.embed_dim + 1), self.knob_cost, device)

    def plan(self, devices):
        plans = super().plan(devices)
        if any(p.knob is None for p in plans):
            raise InfeasibleError("fedhm: some device cannot afford rank 1")
        return plans

    def begin_round(self, r, global_store, participants):
        ranks = sorted({self.plans[c].knob for c in participants} - {FULL_RANK, None})
        self.broadcast = {}
        if ranks:
            svds = store_svds(global_store)
            self.broadcast = {z: factorize_store(global_store, z, svds) for z in ranks}

    def local_train(self, global_store, plan, r, sampler, rng, opt, lr):
        if plan.knob == FULL_RANK:
            store = _shallow(global_store)
        else:
            store = _shallow(self.broadcast[plan.knob])
        names = _trainable_dense(store)
        loss, flops = _train(store, names, sampler, self.shape.steps_per_round, opt, lr, rng)
        return ClientUpdate(plan.device, r, {n: store[n] for n in names}, plan.knob, loss=loss, flops=flops)

    def aggregate(self, global_store, updates, n, r):
        return aggregate_fedhm(global_store, updates, n, self.broadcast, r)


class DepthFL(Strategy):
    """Early exit at ceil(l/2): weak devices hold layers up to it, strong ones train both exits."""

    name = "depthfl"

    @property
    def early(self) -> int:
        return -(-self.arch.layers // 2)

    def knob_cost(self, exits):
        return depthfl_cost(self.arch, exits, self.shape)

    def choose_knob(self, device):
        strong = tuple(sorted({self.early, self.arch.layers}))
        if device.admits(self.knob_cost(strong)):
            return strong
        if device.admits(self.knob_cost((self.early,))):
            return (self.early,)
        return None

    def plan(self, devices):
        plans = super().plan(devices)
        if any(p.knob is None for p in plans):
            raise InfeasibleError("depthfl: some device cannot afford the early exit")
        return plans

    def prepare_global(self, store, rng):
        return add_exit_heads(store, [self.early])

    def local_train(self, global_store, plan, r, sampler, rng, opt, lr):
        depth = plan.knob[-1]
        store = truncate_to_depth(global_store, depth) if depth < self.arch.layers else _shallow(global_store)
        names = _trainable_dense(store)
        loss, flops = _train(store, names, sampler, self.shape.steps_per_round, opt, lr, rng, exits=plan.knob)
        return ClientUpdate(plan.device, r, {n: store[n] for n in names}, plan.knob, loss=loss, flops=flops)

    def aggregate(self, global_store, updates, n, r):
        return aggregate_depthfl(global_store, updates, n, r)


STRATEGIES = ("layerft", "lora", "heterofl", "fedrolex", "fjord", "fedhm", "depthfl")


def make_strategy(name: str, arch, shape, levels: Sequence[float] = DEFAULT_LEVELS) -> Strategy:
    if name == "layerft":
        return LayerFinetuning(arch, shape)
    if name == "lora":
        return HeteroLoRA(arch, shape)
    if name in ("heterofl", "fedrolex", "fjord"):
        return SubsetTraining(arch, shape, name, levels)
    if name == "fedhm":
        return FedHM(arch, shape)
    if name == "depthfl":
        return DepthFL(arch, shape)
    raise ConfigError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}")


def predicted_flops(strategy: Strategy, update: ClientUpdate) -> int:
    """Cost-model FLOPs of a finished client round; FjORD is charged at the levels it drew."""
    if isinstance(strategy, SubsetTraining) and strategy.mode == "fjord":
        return sum(strategy.knob_cost(s).flops_per_step for s in update.trace)
    return strategy.plans[update.client].cost.flops


def check_update(strategy: Strategy, update: ClientUpdate, device: DeviceConstraint):
    """Runtime ledger: the plan fits the budget, and upload/FLOPs match the cost model."""
    plan = strategy.plans[update.client]
    if not device.admits(plan.cost):
        raise FlftError(f"client {update.client}: planned cost exceeds its budget")
    if update.upload_bytes != plan.cost.upload_bytes:
        raise FlftError(
            f"client {update.client}: uploaded {update.upload_bytes} B, cost model predicts {plan.cost.upload_bytes} B"
        )
    expected = predicted_flops(strategy, update)
    if update.flops != expected:
        raise FlftError(f"client {update.client}: executed {update.flops} FLOPs, cost model predicts {expected}")
    if expected > plan.cost.flops:
        raise FlftError(f"client {update.client}: executed FLOPs exceed the planned maximum")
