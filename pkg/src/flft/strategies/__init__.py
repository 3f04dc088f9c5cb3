from flft.strategies.aggregate import (
    ClientUpdate,
    aggregate_coordinates,
    aggregate_depthfl,
    aggregate_fedhm,
    aggregate_hetlora,
    aggregate_layerft,
    aggregate_subset,
    serialize_payload,
)
from flft.strategies.indexing import fedrolex_index_set, fjord_sample_levels, heterofl_index_set
from flft.strategies.schemes import (
    FULL_RANK,
    STRATEGIES,
    ClientPlan,
    DepthFL,
    FedHM,
    HeteroLoRA,
    LayerFinetuning,
    Strategy,
    SubsetTraining,
    check_update,
    make_strategy,
    predicted_flops,
)
