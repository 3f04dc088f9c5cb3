"""Resource-constrained federated finetuning of pretrained tiny Transformers."""

from flft.arch import (
    ArchitectureDescriptor,
    ConstraintScenario,
    DeviceConstraint,
    DeviceProfile,
    TrainingConfiguration,
    assign_devices,
    enumerate_configurations,
)
from flft.costmodel import (
    MemoryBreakdown,
    ResourceCost,
    TrainingShape,
    depthfl_cost,
    layerft_cost,
    lora_cost,
    lowrank_cost,
    param_count,
    subset_cost,
)
from flft.errors import ConfigError, FlftError, InfeasibleError, NumericalError
from flft.selection import (
    SelectionResult,
    feasible_architectures,
    max_trainable_layers,
    select_architecture,
)

__version__ = "0.1.0"
