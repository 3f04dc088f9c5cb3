"""Server-side architecture selection for layer finetuning.

Each device trains the largest number of trailing layers its budgets allow;
the server keeps the architectures every device can train at least one layer
of and picks the one maximizing the average trained depth, preferring deeper
models on ties and the earlier listed model after that.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from flft.arch import ArchitectureDescriptor, DeviceConstraint, TrainingConfiguration
from flft.costmodel import TrainingShape, layerft_cost
from flft.errors import InfeasibleError


@dataclass(frozen=True)
class SelectionResult:
    arch: ArchitectureDescriptor
    arch_index: int
    trained_layers: tuple  # per device, in input order
    feasible: tuple  # indices into the input architecture list

    @property
    def avg_trained(self) -> float:
        return sum(self.trained_layers) / len(self.trained_layers)

    def per_device(self) -> dict:
        return dict(enumerate(self.trained_layers))


def max_trainable_layers(
    arch: ArchitectureDescriptor, constraint: DeviceConstraint, shape: TrainingShape
) -> Optional[int]:
    best = None
    for t in range(1, arch.layers + 1):
        if constraint.admits(layerft_cost(TrainingConfiguration(arch, t), shape)):
            best = t
        else:
            # costs are strictly increasing in t
            break
    return best


def _device_depths(arch, devices, shape, memo):
    out = []
    for c in devices:
        key = (arch, c)
        if key not in memo:
            memo[key] = max_trainable_layers(arch, c, shape)
        out.append(memo[key])
    return out


def feasible_architectures(
    archs: Sequence[ArchitectureDescriptor],
    devices: Sequence[DeviceConstraint],
    shape: TrainingShape,
) -> list[int]:
    """Indices of architectures every device can train at least one layer of."""
    if not archs:
        raise InfeasibleError("empty architecture set")
    memo: dict = {}
    keep = [
        i for i, a in enumerate(archs)
        if all(t is not None for t in _device_depths(a, devices, shape, memo))
    ]
    if not keep:
        raise InfeasibleError("no feasible architecture for the given device constraints")
    return keep


def select_architecture(
    archs: Sequence[ArchitectureDescriptor],
    devices: Sequence[DeviceConstraint],
    shape: TrainingShape,
) -> SelectionResult:
    memo: dict = {}
    feasible = feasible_architectures(archs, devices, shape)
    best_key, best = None, None
    for i in feasible:
        depths = _device_depths(archs[i], devices, shape, memo)
        # |C| is shared, so comparing sums compares averages exactly
        key = (sum(depths), archs[i].layers, -i)
        if best_key is None or key > best_key:
            best_key, best = key, (i, depths)
    i, depths = best
    return SelectionResult(archs[i], i, tuple(depths), tuple(feasible))
