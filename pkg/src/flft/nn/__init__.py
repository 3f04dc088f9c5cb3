from flft.nn.engine import (
    Counters,
    backward,
    cross_entropy,
    early_exit_forward,
    forward,
    grad_check,
    logits,
    loss_and_grads,
)
from flft.nn.store import ParameterStore, init_params, load_checkpoint, save_checkpoint
