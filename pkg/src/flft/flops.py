"""Per-element FLOP constants shared by the analytic cost model and the engine counters.

Backward passes of elementwise ops are charged the same per-element constant
as their forward pass. Linears cost ``2*N*P*Q`` forward, ``4*N*P*Q`` backward
when the weight trains and ``2*N*P*Q`` when only the input gradient is needed.
"""

SOFTMAX = 5
LAYERNORM = 8
GELU = 8
ADD = 1
CROSS_ENTROPY = 5
# scale and add of a LoRA branch onto the main linear output
ADAPTER_MERGE = 2
