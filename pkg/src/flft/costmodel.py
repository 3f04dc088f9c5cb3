"""Closed-form training costs: peak memory, upload bytes and FLOPs per round.

All schemes share one block model (pre-norm decoder layer with fused QKV,
attention output projection and a GELU feed-forward). Counts are exact
integers so they can be compared against the engine's instrumented counters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from flft import flops as K
from flft.arch import ArchitectureDescriptor, TrainingConfiguration
from flft.errors import ConfigError


@dataclass(frozen=True)
class TrainingShape:
    batch: int
    context: int
    steps_per_round: int = 1

    def __post_init__(self):
        for name in ("batch", "context", "steps_per_round"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def tokens(self) -> int:
        return self.batch * self.context


@dataclass(frozen=True)
class MemoryBreakdown:
    params_bytes: int
    grads_optimizer_bytes: int
    activations_bytes: int
    output_buffer_bytes: int

    @property
    def total(self) -> int:
        return (
            self.params_bytes
            + self.grads_optimizer_bytes
            + self.activations_bytes
            + self.output_buffer_bytes
        )


@dataclass(frozen=True)
class ResourceCost:
    memory_bytes: int
    upload_bytes: int
    flops: int
    breakdown: MemoryBreakdown
    flops_per_step: int

    @classmethod
    def build(cls, breakdown: MemoryBreakdown, upload_bytes: int, flops_per_step: int, steps: int):
        return cls(breakdown.total, upload_bytes, flops_per_step * steps, breakdown, flops_per_step)


def scaled_dim(scale: float, n: int) -> int:
    """``floor(scale * n)`` guarded against binary round-off just below an integer."""
    return int(math.floor(scale * n + 1e-9))


def block_linears(d: int, hidden: int) -> list[tuple[int, int]]:
    """(in, out) shapes of qkv, attention output, ffn in, ffn out."""
    return [(d, 3 * d), (d, d), (d, hidden), (hidden, d)]


def block_bias_norm_params(d: int, hidden: int) -> int:
    return (3 * d + d + hidden + d) + 4 * d


def block_params(d: int, hidden: int) -> int:
    return sum(p * q for p, q in block_linears(d, hidden)) + block_bias_norm_params(d, hidden)


def embedding_params(vocab: int, context: int, d: int) -> int:
    return vocab * d + context * d


def head_params(d: int, vocab: int) -> int:
    return 2 * d + d * vocab + vocab


def param_count(arch: ArchitectureDescriptor, scope: str) -> int:
    d, v = arch.embed_dim, arch.out_dim
    if scope == "embedding":
        return embedding_params(arch.vocab, arch.context, d)
    if scope == "block_layer":
        return block_params(d, arch.hidden)
    if scope == "head":
        return head_params(d, v)
    if scope == "total":
        return (
            embedding_params(arch.vocab, arch.context, d)
            + arch.layers * block_params(d, arch.hidden)
            + head_params(d, v)
        )
    raise ValueError(f"unknown scope {scope!r}")


def adapter_params(d: int, hidden: int, rank: int) -> int:
    return sum(rank * (p + q) for p, q in block_linears(d, hidden))


def lowrank_block_params(d: int, hidden: int, rank: int) -> int:
    return adapter_params(d, hidden, rank) + block_bias_norm_params(d, hidden)


# --- per-step FLOP and activation pieces -------------------------------------------------


def _block_forward_flops(b, t, d, hidden, heads, lora=0, lowrank=0) -> int:
    n = b * t
    f = 2 * K.LAYERNORM * n * d + 2 * K.ADD * n * d + K.GELU * n * hidden
    f += 2 * (2 * b * t * t * d) + K.SOFTMAX * b * heads * t * t
    for p, q in block_linears(d, hidden):
        if lowrank:
            f += 2 * n * lowrank * (p + q)
        else:
            f += 2 * n * p * q
        if lora:
            f += 2 * n * lora * (p + q) + K.ADAPTER_MERGE * n * q
    return f


def _block_backward_flops(b, t, d, hidden, heads, weights_trained=True, lora=0, lowrank=0) -> int:
    n = b * t
    f = 2 * K.LAYERNORM * n * d + 2 * K.ADD * n * d + K.GELU * n * hidden
    f += 2 * (4 * b * t * t * d) + K.SOFTMAX * b * heads * t * t
    for p, q in block_linears(d, hidden):
        if lowrank:
            f += 4 * n * lowrank * (p + q)
        else:
            f += (4 if weights_trained else 2) * n * p * q
        if lora:
            f += 4 * n * lora * (p + q) + K.ADAPTER_MERGE * n * q
    return f


def _head_forward_flops(b, t, d, vocab) -> int:
    n = b * t
    return K.LAYERNORM * n * d + 2 * n * d * vocab + K.CROSS_ENTROPY * n * vocab


def _head_backward_flops(b, t, d, vocab) -> int:
    n = b * t
    return K.LAYERNORM * n * d + 4 * n * d * vocab + K.CROSS_ENTROPY * n * vocab


def layer_activation_count(b, t, d, hidden, heads, rank=0) -> int:
    """Scalars retained for backward by one layer (16D per token at ffn_mult=4, plus probs)."""
    n = b * t
    return n * (8 * d + 2 * hidden) + b * heads * t * t + 4 * n * rank


def head_activation_count(b, t, d) -> int:
    # final-norm input and output-linear input
    return 2 * b * t * d


# --- scheme costs -------------------------------------------------------------------------


def _check_context(arch: ArchitectureDescriptor, shape: TrainingShape):
    if shape.context > arch.context:
        raise ConfigError(f"shape context {shape.context} exceeds arch context {arch.context}")


def layerft_cost(config: TrainingConfiguration, shape: TrainingShape) -> ResourceCost:
    arch, t_train = config.arch, config.trained_layers
    _check_context(arch, shape)
    b, t, d, hid, h, v = shape.batch, shape.context, arch.embed_dim, arch.hidden, arch.heads, arch.out_dim
    sb = arch.scalar_bytes
    trained = t_train * block_params(d, hid) + head_params(d, v)
    acts = t_train * layer_activation_count(b, t, d, hid, h) + head_activation_count(b, t, d)
    breakdown = MemoryBreakdown(
        params_bytes=sb * param_count(arch, "total"),
        grads_optimizer_bytes=3 * sb * trained,
        activations_bytes=sb * acts,
        output_buffer_bytes=sb * b * t * v,
    )
    per_step = (
        arch.layers * _block_forward_flops(b, t, d, hid, h)
        + t_train * _block_backward_flops(b, t, d, hid, h)
        + _head_forward_flops(b, t, d, v)
        + _head_backward_flops(b, t, d, v)
    )
    return ResourceCost.build(breakdown, sb * trained, per_step, shape.steps_per_round)


def lora_cost(arch: ArchitectureDescriptor, rank: int, shape: TrainingShape) -> ResourceCost:
    if not 1 <= rank <= arch.embed_dim:
        raise ConfigError(f"LoRA rank {rank} outside [1, {arch.embed_dim}]")
    _check_context(arch, shape)
    b, t, d, hid, h, v = shape.batch, shape.context, arch.embed_dim, arch.hidden, arch.heads, arch.out_dim
    sb, l = arch.scalar_bytes, arch.layers
    adapters = l * adapter_params(d, hid, rank)
    trained = adapters + l * 4 * d + head_params(d, v)
    acts = l * layer_activation_count(b, t, d, hid, h, rank) + head_activation_count(b, t, d)
    breakdown = MemoryBreakdown(
        params_bytes=sb * (param_count(arch, "total") + adapters),
        grads_optimizer_bytes=3 * sb * trained,
        activations_bytes=sb * acts,
        output_buffer_bytes=sb * b * t * v,
    )
    per_step = (
        l * _block_forward_flops(b, t, d, hid, h, lora=rank)
        + l * _block_backward_flops(b, t, d, hid, h, weights_trained=False, lora=rank)
        + _head_forward_flops(b, t, d, v)
        + _head_backward_flops(b, t, d, v)
    )
    return ResourceCost.build(breakdown, sb * trained, per_step, shape.steps_per_round)


def subset_dims(arch: ArchitectureDescriptor, scale: float) -> tuple[int, int]:
    """Scaled (embed, hidden) widths; raises when the heads would collapse."""
    if not 0 < scale <= 1:
        raise ConfigError(f"scale {scale} outside (0, 1]")
    d = scaled_dim(scale, arch.embed_dim)
    hid = scaled_dim(scale, arch.hidden)
    if d < arch.heads or hid < 1:
        raise ConfigError(
            f"scale {scale} leaves {d} embedding dims for {arch.heads} heads (head collapse)"
        )
    return d, hid


def subset_cost(arch: ArchitectureDescriptor, scale: float, shape: TrainingShape) -> ResourceCost:
    d, hid = subset_dims(arch, scale)
    _check_context(arch, shape)
    b, t, h, v, sb, l = shape.batch, shape.context, arch.heads, arch.out_dim, arch.scalar_bytes, arch.layers
    trained = l * block_params(d, hid) + head_params(d, v)
    acts = l * layer_activation_count(b, t, d, hid, h) + head_activation_count(b, t, d)
    breakdown = MemoryBreakdown(
        params_bytes=sb * (embedding_params(arch.vocab, arch.context, d) + trained),
        grads_optimizer_bytes=3 * sb * trained,
        activations_bytes=sb * acts,
        output_buffer_bytes=sb * b * t * v,
    )
    per_step = (
        l * (_block_forward_flops(b, t, d, hid, h) + _block_backward_flops(b, t, d, hid, h))
        + _head_forward_flops(b, t, d, v)
        + _head_backward_flops(b, t, d, v)
    )
    return ResourceCost.build(breakdown, sb * trained, per_step, shape.steps_per_round)


def lowrank_cost(arch: ArchitectureDescriptor, rank: int, shape: TrainingShape) -> ResourceCost:
    d, hid = arch.embed_dim, arch.hidden
    max_rank = min(min(p, q) for p, q in block_linears(d, hid))
    if not 1 <= rank <= max_rank:
        raise ConfigError(f"low-rank rank {rank} outside [1, {max_rank}]")
    _check_context(arch, shape)
    b, t, h, v, sb, l = shape.batch, shape.context, arch.heads, arch.out_dim, arch.scalar_bytes, arch.layers
    trained = l * lowrank_block_params(d, hid, rank) + head_params(d, v)
    acts = l * layer_activation_count(b, t, d, hid, h, rank) + head_activation_count(b, t, d)
    breakdown = MemoryBreakdown(
        params_bytes=sb * (param_count(arch, "embedding") + trained),
        grads_optimizer_bytes=3 * sb * trained,
        activations_bytes=sb * acts,
        output_buffer_bytes=sb * b * t * v,
    )
    per_step = (
        l * (_block_forward_flops(b, t, d, hid, h, lowrank=rank)
             + _block_backward_flops(b, t, d, hid, h, lowrank=rank))
        + _head_forward_flops(b, t, d, v)
        + _head_backward_flops(b, t, d, v)
    )
    return ResourceCost.build(breakdown, sb * trained, per_step, shape.steps_per_round)


def depthfl_cost(arch: ArchitectureDescriptor, exits: Iterable[int], shape: TrainingShape) -> ResourceCost:
    """Client holding layers up to its deepest exit, training all of them plus every exit head."""
    exits = sorted(set(int(e) for e in exits))
    if not exits or exits[0] < 1 or exits[-1] > arch.layers:
        raise ConfigError(f"exit depths {exits} invalid for {arch.layers} layers")
    _check_context(arch, shape)
    b, t, d, hid, h, v = shape.batch, shape.context, arch.embed_dim, arch.hidden, arch.heads, arch.out_dim
    sb, depth, n_exits = arch.scalar_bytes, exits[-1], len(exits)
    trained = depth * block_params(d, hid) + n_exits * head_params(d, v)
    acts = depth * layer_activation_count(b, t, d, hid, h) + n_exits * head_activation_count(b, t, d)
    breakdown = MemoryBreakdown(
        params_bytes=sb * (param_count(arch, "embedding") + trained),
        grads_optimizer_bytes=3 * sb * trained,
        activations_bytes=sb * acts,
        output_buffer_bytes=sb * n_exits * b * t * v,
    )
    per_step = depth * (
        _block_forward_flops(b, t, d, hid, h) + _block_backward_flops(b, t, d, hid, h)
    ) + n_exits * (_head_forward_flops(b, t, d, v) + _head_backward_flops(b, t, d, v))
    # gradients from exits below the top are added into the residual stream
    per_step += (n_exits - 1) * K.ADD * b * t * d
    return ResourceCost.build(breakdown, sb * trained, per_step, shape.steps_per_round)


def forward_only_flops(arch: ArchitectureDescriptor, shape: TrainingShape) -> int:
    """Inference cost of one batch through all layers and the head (no loss)."""
    b, t, d, v = shape.batch, shape.context, arch.embed_dim, arch.out_dim
    return arch.layers * _block_forward_flops(b, t, d, arch.hidden, arch.heads) + (
        K.LAYERNORM * b * t * d + 2 * b * t * d * v
    )


SCHEMES = ("layerft", "lora", "subset", "lowrank", "depthfl")


def scheme_cost(arch: ArchitectureDescriptor, scheme: str, knob, shape: TrainingShape) -> ResourceCost:
    if scheme == "layerft":
        return layerft_cost(TrainingConfiguration(arch, int(knob)), shape)
    if scheme == "lora":
        return lora_cost(arch, int(knob), shape)
    if scheme == "subset":
        return subset_cost(arch, float(knob), shape)
    if scheme == "lowrank":
        return lowrank_cost(arch, int(knob), shape)
    if scheme == "depthfl":
        return depthfl_cost(arch, knob, shape)
    raise ConfigError(f"unknown scheme {scheme!r}")


KNOB_NAMES = {"layerft": "t", "lora": "z", "subset": "s", "lowrank": "z", "depthfl": "exits"}


def memory_breakdown_report(
    arch: ArchitectureDescriptor, entries: Sequence[tuple[str, object]], shape: TrainingShape
) -> list[dict]:
    """One row per (scheme, knob) with the memory components, upload and FLOPs."""
    rows = []
    for scheme, knob in entries:
        cost = scheme_cost(arch, scheme, knob, shape)
        bd = cost.breakdown
        rows.append(
            {
                "scheme": scheme,
                "knob": KNOB_NAMES[scheme],
                "t_or_rank": "+".join(map(str, sorted(knob))) if scheme == "depthfl" else knob,
                "params_B": bd.params_bytes,
                "gradsopt_B": bd.grads_optimizer_bytes,
                "activations_B": bd.activations_bytes,
                "output_B": bd.output_buffer_bytes,
                "peak_B": cost.memory_bytes,
                "upload_B": cost.upload_bytes,
                "flops": cost.flops,
            }
        )
    return rows


def default_breakdown_entries(arch: ArchitectureDescriptor, ranks: Optional[Sequence[int]] = None):
    ranks = ranks or sorted({r for r in (1, 2, 4, arch.embed_dim // 8, arch.embed_dim // 4) if r >= 1})
    return [("layerft", t) for t in range(1, arch.layers + 1)] + [("lora", z) for z in ranks]
