"""Architecture descriptors, training configurations and device constraints.

Layer indices are 0-based throughout the package: an architecture with ``l``
layers owns layers ``0 .. l-1`` and configuration ``t`` trains ``l-t .. l-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from flft.errors import ConfigError


@dataclass(frozen=True)
class ArchitectureDescriptor:
    layers: int
    embed_dim: int = 32
    heads: int = 4
    ffn_mult: int = 4
    vocab: int = 128
    context: int = 64
    scalar_bytes: int = 4
    num_outputs: Optional[int] = None  # head width when it differs from vocab (classification)

    def __post_init__(self):
        for name in ("layers", "embed_dim", "heads", "ffn_mult", "vocab", "context", "scalar_bytes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide embed_dim={self.embed_dim}")
        if self.num_outputs is not None and self.num_outputs < 1:
            raise ConfigError(f"num_outputs must be positive, got {self.num_outputs}")

    @property
    def out_dim(self) -> int:
        return self.vocab if self.num_outputs is None else self.num_outputs

    @property
    def hidden(self) -> int:
        return self.ffn_mult * self.embed_dim

    def with_layers(self, layers: int) -> "ArchitectureDescriptor":
        return replace(self, layers=layers)

    def is_sibling(self, other: "ArchitectureDescriptor") -> bool:
        return replace(other, layers=self.layers) == self


@dataclass(frozen=True)
class TrainingConfiguration:
    arch: ArchitectureDescriptor
    trained_layers: int

    def __post_init__(self):
        if not 1 <= self.trained_layers <= self.arch.layers:
            raise ConfigError(
                f"trained_layers={self.trained_layers} outside [1, {self.arch.layers}]"
            )

    @property
    def first_trained(self) -> int:
        return self.arch.layers - self.trained_layers

    @property
    def frozen_indices(self) -> range:
        return range(0, self.first_trained)

    @property
    def trained_indices(self) -> range:
        return range(self.first_trained, self.arch.layers)


@dataclass(frozen=True)
class DeviceConstraint:
    """Per-round budgets; ``None`` means unbounded."""

    memory_bytes: Optional[float] = None
    upload_bytes: Optional[float] = None
    flops: Optional[float] = None

    def __post_init__(self):
        for name in ("memory_bytes", "upload_bytes", "flops"):
            value = getattr(self, name)
            if value is not None and (math.isnan(value) or value < 0):
                raise ConfigError(f"{name} budget must be non-negative, got {value!r}")

    @classmethod
    def unbounded(cls) -> "DeviceConstraint":
        return cls()

    def admits(self, cost) -> bool:
        """True iff ``cost`` (anything with memory/upload/flops attributes) fits every budget."""
        return (
            (self.memory_bytes is None or cost.memory_bytes <= self.memory_bytes)
            and (self.upload_bytes is None or cost.upload_bytes <= self.upload_bytes)
            and (self.flops is None or cost.flops <= self.flops)
        )

    def weakened(self, factor: float) -> "DeviceConstraint":
        def scale(v):
            return None if v is None else v * factor

        return DeviceConstraint(scale(self.memory_bytes), scale(self.upload_bytes), scale(self.flops))


@dataclass(frozen=True)
class ConstraintScenario:
    groups: tuple  # of (fraction, DeviceConstraint)
    num_devices: int
    names: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple((float(f), c) for f, c in self.groups))
        if self.num_devices < 1:
            raise ConfigError("num_devices must be >= 1")
        if not self.groups:
            raise ConfigError("scenario needs at least one group")
        if any(f < 0 for f, _ in self.groups):
            raise ConfigError("group fractions must be non-negative")
        if abs(sum(f for f, _ in self.groups) - 1.0) > 1e-9:
            raise ConfigError(
                f"group fractions sum to {sum(f for f, _ in self.groups)!r}, expected 1"
            )
        if not self.names:
            object.__setattr__(self, "names", tuple(f"group{i}" for i in range(len(self.groups))))
        elif len(self.names) != len(self.groups):
            raise ConfigError("one name per group required")

    def group_sizes(self) -> list[int]:
        """Largest-remainder rounding of ``fraction * num_devices``; ties go to the earlier group."""
        quotas = [f * self.num_devices for f, _ in self.groups]
        sizes = [int(math.floor(q + 1e-12)) for q in quotas]
        leftover = self.num_devices - sum(sizes)
        order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
        for i in order[:leftover]:
            sizes[i] += 1
        return sizes


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    group: int
    constraint: DeviceConstraint


def enumerate_configurations(arch: ArchitectureDescriptor) -> list[TrainingConfiguration]:
    return [TrainingConfiguration(arch, t) for t in range(1, arch.layers + 1)]


def assign_devices(scenario: ConstraintScenario, seed: int) -> list[DeviceProfile]:
    sizes = scenario.group_sizes()
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA551])).permutation(
        scenario.num_devices
    )
    group_of = np.empty(scenario.num_devices, dtype=np.int64)
    start = 0
    for g, size in enumerate(sizes):
        group_of[perm[start:start + size]] = g
        start += size
    return [
        DeviceProfile(i, int(group_of[i]), scenario.groups[int(group_of[i])][1])
        for i in range(scenario.num_devices)
    ]


def sibling_family(base: ArchitectureDescriptor, layer_counts: Sequence[int]) -> list[ArchitectureDescriptor]:
    return [base.with_layers(int(l)) for l in layer_counts]
