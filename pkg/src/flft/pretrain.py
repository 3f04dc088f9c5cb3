"""Centralized next-token pretraining of the architecture family."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from flft.arch import ArchitectureDescriptor
from flft.data import eval_windows, sample_batch
from flft.errors import ConfigError
from flft.fedsim import evaluate_next_token
from flft.nn.engine import loss_and_grads
from flft.nn.optim import AdamWState, OptimizerSpec, adamw_step
from flft.nn.store import ParameterStore, init_params


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 20000
    batch: int = 32
    lr: float = 2e-3
    lr_end: float = 1e-4
    warmup: int = 200
    weight_decay: float = 0.1
    dropout: float = 0.05
    log_every: int = 1000
    eval_windows: int = 32

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.warmup < 0:
            raise ConfigError("pretraining needs steps >= 0, batch >= 1 and warmup >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")


def pretrain(
    arch: ArchitectureDescriptor,
    train_tokens: np.ndarray,
    cfg: PretrainConfig,
    seed: int,
    eval_tokens: Optional[np.ndarray] = None,
    log: Optional[Callable[[str], None]] = None,
) -> tuple[ParameterStore, list]:
    """Train every tensor from a seeded initialization; returns the store and (step, loss) history."""
    store = init_params(arch, np.random.default_rng(np.random.SeedSequence([seed, arch.layers, 0x9E])))
    rng = np.random.default_rng(np.random.SeedSequence([seed, arch.layers, 0xBA]))
    names = store.names()
    spec = OptimizerSpec(cfg.lr, cfg.lr_end, weight_decay=cfg.weight_decay, horizon=max(cfg.steps, 1))
    state = AdamWState.fresh(store, names)
    held = eval_windows(eval_tokens, arch.context, cfg.eval_windows) if eval_tokens is not None else None
    history = []
    running = None
    for step in range(cfg.steps):
        x, y = sample_batch(train_tokens, cfg.batch, arch.context, rng)
        loss, grads = loss_and_grads(store, x, y, names, dropout=cfg.dropout, rng=rng)
        lr = spec.lr(step) * min(1.0, (step + 1) / cfg.warmup) if cfg.warmup else spec.lr(step)
        adamw_step(store, grads, state, spec, lr)
        running = loss if running is None else 0.98 * running + 0.02 * loss
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            history.append((step + 1, running))
            if log:
                msg = f"l={arch.layers} step {step + 1}/{cfg.steps} train {running:.4f}"
                if held is not None:
                    msg += f" held-out {evaluate_next_token(store, *held)[0]:.4f}"
                log(msg)
    return store, history
