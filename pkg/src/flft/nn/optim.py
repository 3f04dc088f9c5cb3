"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from flft.errors import ConfigError

_DECAYED_SUFFIXES = (".w", ".u", ".v", ".lora_a", ".lora_b")


@dataclass(frozen=True)
class OptimizerSpec:
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    horizon: int = 1  # rounds (or steps) of one cosine half-period

    def lr(self, r: float) -> float:
        r = min(max(r, 0), self.horizon)
        return self.lr_end + (self.lr_start - self.lr_end) * (1 + math.cos(math.pi * r / self.horizon)) / 2


def decays(name: str) -> bool:
    """Weight decay applies to linear weights only (not norms, biases or embeddings)."""
    return not name.startswith("emb.") and name.endswith(_DECAYED_SUFFIXES)


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def fresh(cls, store, names) -> "AdamWState":
        return cls(
            {n: np.zeros_like(store[n]) for n in names},
            {n: np.zeros_like(store[n]) for n in names},
        )


def adamw_step(store, grads: dict, state: AdamWState, spec: OptimizerSpec, lr: float):
    """One in-place update of the tensors named in ``grads``."""
    if set(grads) != set(state.m):
        missing = set(state.m) ^ set(grads)
        raise ConfigError(f"gradient/state mismatch on {sorted(missing)[:3]}")
    state.step += 1
    b1, b2 = spec.beta1, spec.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = store[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ConfigError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if spec.weight_decay and decays(name):
            p = p * (1.0 - lr * spec.weight_decay)
        store[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + spec.eps)
