"""Manual-backprop decoder-only Transformer with instrumented counters.

One code path serves every training mode. The mode is implied by which tensors
a store holds (``.w`` dense, ``.u``/``.v`` factorized, ``.lora_a``/``.lora_b``
adapters, ``exits.*`` early-exit heads) and by the set of trainable names:

* layers below the lowest layer holding a trainable tensor run forward only
  and retain nothing;
* every layer from there up retains the canonical activation set and is
  traversed backward; linears whose weight is frozen only propagate the
  input gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from flft import flops as K
from flft.errors import ConfigError, NumericalError
from flft.nn.store import LINEAR_NAMES, ParameterStore, exit_prefix, layer_prefix

LN_EPS = 1e-5
# absolute floor of the grad-check denominator; well above float64 loss round-off (~1e-13)
GRAD_CHECK_FLOOR = 1e-7
_GELU_C = math.sqrt(2.0 / math.pi)


def lora_scaling(rank: int, alpha: Optional[float] = None) -> float:
    alpha = rank if alpha is None else alpha
    return alpha / rank


class Counters:
    """FLOPs executed and bytes retained for backward, charged at op granularity."""

    def __init__(self, scalar_bytes: int = 4):
        self.scalar_bytes = scalar_bytes
        self.flops = 0
        self.retained_bytes = 0
        self.output_bytes = 0

    def matmul(self, m: int, k: int, n: int):
        self.flops += 2 * m * k * n

    def elementwise(self, count: int, per_element: int):
        self.flops += per_element * count

    def retain(self, arr: np.ndarray):
        self.retained_bytes += arr.size * self.scalar_bytes

    def output(self, arr: np.ndarray):
        self.output_bytes += arr.size * self.scalar_bytes

    def reset(self):
        self.flops = self.retained_bytes = self.output_bytes = 0


@dataclass
class ForwardCache:
    store: ParameterStore
    batch: int
    seq: int
    trainable: frozenset
    lowest: int
    depth: int
    exits: tuple
    counters: Counters
    layers: dict = field(default_factory=dict)
    heads: dict = field(default_factory=dict)
    tokens: Optional[np.ndarray] = None


# --- elementwise primitives -------------------------------------------------------------------


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    return xc * rstd * g + b


def _layer_norm_backward(x, g, dy):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, (dy * xhat).sum(0), dy.sum(0)


def _gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * u * (1.0 + 0.044715 * u * u)))


def _gelu_grad(u):
    u2 = u * u
    th = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u2))
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * u2)


def head_slices(d: int, heads: int) -> list[slice]:
    """Contiguous near-equal split of ``d`` dims into ``heads`` (array_split semantics)."""
    sizes = [d // heads + (1 if i < d % heads else 0) for i in range(heads)]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(heads)]


def _dropout_mask(shape, p, rng, dtype):
    return (rng.random(shape) >= p).astype(dtype) / (1.0 - p)


# --- linears ----------------------------------------------------------------------------------


def _linear_forward(store, p, x, ctr, keep, lc, key):
    n, pin = x.shape
    w = store.get(p + "w")
    if w is not None:
        y = x @ w
        ctr.matmul(n, pin, w.shape[1])
    else:
        u, v = store[p + "u"], store[p + "v"]
        m = x @ u
        y = m @ v
        ctr.matmul(n, pin, u.shape[1])
        ctr.matmul(n, u.shape[1], v.shape[1])
        if keep:
            lc[key + ":m"] = m
            ctr.retain(m)
    y = y + store[p + "b"]
    la = store.get(p + "lora_a")
    if la is not None:
        lb = store[p + "lora_b"]
        a = x @ la
        ctr.matmul(n, pin, la.shape[1])
        y = y + lora_scaling(la.shape[1]) * (a @ lb)
        ctr.matmul(n, la.shape[1], lb.shape[1])
        ctr.elementwise(y.size, K.ADAPTER_MERGE)
        if keep:
            lc[key + ":a"] = a
            ctr.retain(a)
    return y


def _linear_backward(store, p, x, dy, lc, key, trainable, grads, ctr):
    n, q = dy.shape
    pin = x.shape[1]
    w = store.get(p + "w")
    if w is not None:
        if p + "w" in trainable:
            grads[p + "w"] = x.T @ dy
            ctr.matmul(pin, n, q)
        dx = dy @ w.T
        ctr.matmul(n, q, pin)
    else:
        u, v = store[p + "u"], store[p + "v"]
        z = u.shape[1]
        m = lc[key + ":m"]
        if p + "v" in trainable:
            grads[p + "v"] = m.T @ dy
            ctr.matmul(z, n, q)
        dm = dy @ v.T
        ctr.matmul(n, q, z)
        if p + "u" in trainable:
            grads[p + "u"] = x.T @ dm
            ctr.matmul(pin, n, z)
        dx = dm @ u.T
        ctr.matmul(n, z, pin)
    if p + "b" in trainable:
        grads[p + "b"] = dy.sum(0)
    la = store.get(p + "lora_a")
    if la is not None:
        lb = store[p + "lora_b"]
        z = la.shape[1]
        ctr.elementwise(dy.size, K.ADAPTER_MERGE)
        dys = lora_scaling(z) * dy
        a = lc[key + ":a"]
        if p + "lora_b" in trainable:
            grads[p + "lora_b"] = a.T @ dys
            ctr.matmul(z, n, q)
        da = dys @ lb.T
        ctr.matmul(n, q, z)
        if p + "lora_a" in trainable:
            grads[p + "lora_a"] = x.T @ da
            ctr.matmul(pin, n, z)
        dx = dx + da @ la.T
        ctr.matmul(n, z, pin)
    return dx


# --- layer ------------------------------------------------------------------------------------


def _layer_forward(store, i, x, b, t, heads, ctr, keep, dropout, rng):
    p = layer_prefix(i)
    d = x.shape[-1]
    n = b * t
    lc = {}
    if keep:
        lc["x"] = x
        ctr.retain(x)
    h1 = _layer_norm(x, store[p + "ln1.g"], store[p + "ln1.b"])
    ctr.elementwise(n * d, K.LAYERNORM)
    if keep:
        lc["h1"] = h1
        ctr.retain(h1)
    qkv = _linear_forward(store, p + "qkv.", h1, ctr, keep, lc, "qkv")
    if keep:
        lc["qkv"] = qkv
        ctr.retain(qkv)
    q = qkv[:, :d].reshape(b, t, d)
    k = qkv[:, d:2 * d].reshape(b, t, d)
    v = qkv[:, 2 * d:].reshape(b, t, d)
    causal = np.tril(np.ones((t, t), dtype=bool))
    ctx = np.empty((b, t, d), dtype=x.dtype)
    probs = []
    for sl in head_slices(d, heads):
        dh = sl.stop - sl.start
        s = (q[:, :, sl] @ k[:, :, sl].transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        ctr.flops += 2 * b * t * t * dh
        s = np.where(causal, s, -np.inf)
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        pr = e / e.sum(-1, keepdims=True)
        ctr.elementwise(b * t * t, K.SOFTMAX)
        ctx[:, :, sl] = pr @ v[:, :, sl]
        ctr.flops += 2 * b * t * t * dh
        probs.append(pr)
        if keep:
            ctr.retain(pr)
    ctx = ctx.reshape(n, d)
    if keep:
        lc["probs"] = probs
        lc["ctx"] = ctx
        ctr.retain(ctx)
    o = _linear_forward(store, p + "attn_out.", ctx, ctr, keep, lc, "attn_out")
    if dropout > 0:
        mask = _dropout_mask(o.shape, dropout, rng, o.dtype)
        o = o * mask
        lc["drop1"] = mask
    x1 = x + o
    ctr.elementwise(n * d, K.ADD)
    if keep:
        lc["x1"] = x1
        ctr.retain(x1)
    h2 = _layer_norm(x1, store[p + "ln2.g"], store[p + "ln2.b"])
    ctr.elementwise(n * d, K.LAYERNORM)
    if keep:
        lc["h2"] = h2
        ctr.retain(h2)
    uu = _linear_forward(store, p + "ffn_in.", h2, ctr, keep, lc, "ffn_in")
    if keep:
        lc["u"] = uu
        ctr.retain(uu)
    g = _gelu(uu)
    ctr.elementwise(uu.size, K.GELU)
    if keep:
        lc["g"] = g
        ctr.retain(g)
    f = _linear_forward(store, p + "ffn_out.", g, ctr, keep, lc, "ffn_out")
    if dropout > 0:
        mask = _dropout_mask(f.shape, dropout, rng, f.dtype)
        f = f * mask
        lc["drop2"] = mask
    x2 = x1 + f
    ctr.elementwise(n * d, K.ADD)
    return x2, lc


def _layer_backward(store, i, lc, dy, b, t, heads, trainable, grads, ctr):
    p = layer_prefix(i)
    n, d = dy.shape
    ctr.elementwise(n * d, K.ADD)
    df = dy * lc["drop2"] if "drop2" in lc else dy
    dg = _linear_backward(store, p + "ffn_out.", lc["g"], df, lc, "ffn_out", trainable, grads, ctr)
    du = dg * _gelu_grad(lc["u"])
    ctr.elementwise(du.size, K.GELU)
    dh2 = _linear_backward(store, p + "ffn_in.", lc["h2"], du, lc, "ffn_in", trainable, grads, ctr)
    dx1_ln, dg2, db2 = _layer_norm_backward(lc["x1"], store[p + "ln2.g"], dh2)
    ctr.elementwise(n * d, K.LAYERNORM)
    if p + "ln2.g" in trainable:
        grads[p + "ln2.g"] = dg2
    if p + "ln2.b" in trainable:
        grads[p + "ln2.b"] = db2
    dx1 = dy + dx1_ln
    ctr.elementwise(n * d, K.ADD)
    do = dx1 * lc["drop1"] if "drop1" in lc else dx1
    dctx = _linear_backward(store, p + "attn_out.", lc["ctx"], do, lc, "attn_out", trainable, grads, ctr)
    qkv = lc["qkv"]
    q = qkv[:, :d].reshape(b, t, d)
    k = qkv[:, d:2 * d].reshape(b, t, d)
    v = qkv[:, 2 * d:].reshape(b, t, d)
    dctx = dctx.reshape(b, t, d)
    dq = np.empty((b, t, d), dtype=dy.dtype)
    dk = np.empty_like(dq)
    dv = np.empty_like(dq)
    for sl, pr in zip(head_slices(d, heads), lc["probs"]):
        dh = sl.stop - sl.start
        dc = dctx[:, :, sl]
        dp = dc @ v[:, :, sl].transpose(0, 2, 1)
        dv[:, :, sl] = pr.transpose(0, 2, 1) @ dc
        ctr.flops += 2 * (2 * b * t * t * dh)
        ds = pr * (dp - (dp * pr).sum(-1, keepdims=True))
        ctr.elementwise(b * t * t, K.SOFTMAX)
        ds *= 1.0 / math.sqrt(dh)
        dq[:, :, sl] = ds @ k[:, :, sl]
        dk[:, :, sl] = ds.transpose(0, 2, 1) @ q[:, :, sl]
        ctr.flops += 2 * (2 * b * t * t * dh)
    dqkv = np.concatenate([dq.reshape(n, d), dk.reshape(n, d), dv.reshape(n, d)], axis=1)
    dh1 = _linear_backward(store, p + "qkv.", lc["h1"], dqkv, lc, "qkv", trainable, grads, ctr)
    dx_ln, dg1, db1 = _layer_norm_backward(lc["x"], store[p + "ln1.g"], dh1)
    ctr.elementwise(n * d, K.LAYERNORM)
    if p + "ln1.g" in trainable:
        grads[p + "ln1.g"] = dg1
    if p + "ln1.b" in trainable:
        grads[p + "ln1.b"] = db1
    return dx1 + dx_ln


# --- public API -------------------------------------------------------------------------------


def _resolve_exits(store: ParameterStore, exits) -> tuple:
    held = store.num_layers
    if exits is None:
        exits = (held,)
    exits = tuple(sorted(set(int(e) for e in exits)))
    if not exits:
        raise ConfigError("at least one exit required")
    for e in exits:
        if not 1 <= e <= held:
            raise ConfigError(f"exit depth {e} outside [1, {held}]")
        if exit_prefix(e, store.arch.layers) + "out.w" not in store:
            raise ConfigError(f"no head parameters for exit depth {e}")
    return exits


def _lowest_trainable_layer(trainable, depth: int) -> int:
    lowest = depth
    for name in trainable:
        if name.startswith("emb."):
            return 0
        if name.startswith("layers."):
            i = int(name.split(".", 2)[1])
            if i < lowest:
                lowest = i
    return lowest


def embed(store: ParameterStore, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ConfigError(f"tokens must be a B x T grid, got shape {tokens.shape}")
    b, t = tokens.shape
    vocab, ctx = store["emb.tok"].shape[0], store["emb.pos"].shape[0]
    if t > ctx:
        raise ConfigError(f"sequence length {t} exceeds context {ctx}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ConfigError(f"token id out of range [0, {vocab})")
    return (store["emb.tok"][tokens] + store["emb.pos"][:t]).reshape(b * t, -1)


def forward(
    store: ParameterStore,
    tokens: np.ndarray,
    *,
    trainable: Iterable[str] = (),
    exits=None,
    counters: Optional[Counters] = None,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
):
    """Run the model; returns ``({exit depth: logits B x T x out}, cache)``."""
    ctr = counters if counters is not None else Counters(store.arch.scalar_bytes)
    trainable = frozenset(trainable)
    exits = _resolve_exits(store, exits)
    depth = exits[-1]
    training = bool(trainable)
    lowest = _lowest_trainable_layer(trainable, depth) if training else depth
    if dropout > 0 and rng is None:
        raise ConfigError("dropout requires an rng")
    tokens = np.asarray(tokens)
    x = embed(store, tokens)
    b, t = tokens.shape
    heads = store.arch.heads
    cache = ForwardCache(store, b, t, trainable, lowest, depth, exits, ctr, tokens=tokens)
    logits = {}
    for i in range(depth):
        x, lc = _layer_forward(store, i, x, b, t, heads, ctr, training and i >= lowest, dropout, rng)
        if training and i >= lowest:
            cache.layers[i] = lc
        if i + 1 in exits:
            hp = exit_prefix(i + 1, store.arch.layers)
            hf = _layer_norm(x, store[hp + "ln.g"], store[hp + "ln.b"])
            ctr.elementwise(x.size, K.LAYERNORM)
            w = store[hp + "out.w"]
            lg = hf @ w + store[hp + "out.b"]
            ctr.matmul(x.shape[0], w.shape[0], w.shape[1])
            ctr.output(lg)
            if training:
                ctr.retain(x)
                ctr.retain(hf)
                cache.heads[i + 1] = {"x": x, "hf": hf}
            logits[i + 1] = lg.reshape(b, t, -1)
    return logits, cache


def logits(store: ParameterStore, tokens: np.ndarray) -> np.ndarray:
    out, _ = forward(store, tokens)
    return out[max(out)]


def early_exit_forward(store: ParameterStore, exits, tokens, counters: Optional[Counters] = None) -> dict:
    out, _ = forward(store, tokens, exits=exits, counters=counters)
    return out


def backward(cache: Optional[ForwardCache], dlogits) -> dict:
    """Gradients for trainable tensors only, keyed by name."""
    if cache is None or (not cache.layers and not cache.heads):
        raise ConfigError("backward requires a training forward cache")
    if not isinstance(dlogits, dict):
        dlogits = {cache.depth: dlogits}
    store, ctr, trainable = cache.store, cache.counters, cache.trainable
    b, t = cache.batch, cache.seq
    grads: dict[str, np.ndarray] = {}
    pending = {}
    for depth, dl in dlogits.items():
        hc = cache.heads[depth]
        hp = exit_prefix(depth, store.arch.layers)
        dl = dl.reshape(b * t, -1)
        w = store[hp + "out.w"]
        if hp + "out.w" in trainable:
            grads[hp + "out.w"] = hc["hf"].T @ dl
            ctr.matmul(w.shape[0], dl.shape[0], w.shape[1])
        if hp + "out.b" in trainable:
            grads[hp + "out.b"] = dl.sum(0)
        dhf = dl @ w.T
        ctr.matmul(dl.shape[0], w.shape[1], w.shape[0])
        dx, dgam, dbet = _layer_norm_backward(hc["x"], store[hp + "ln.g"], dhf)
        ctr.elementwise(dx.size, K.LAYERNORM)
        if hp + "ln.g" in trainable:
            grads[hp + "ln.g"] = dgam
        if hp + "ln.b" in trainable:
            grads[hp + "ln.b"] = dbet
        pending[depth] = dx
    dx = pending.get(cache.depth)
    for i in range(cache.depth - 1, cache.lowest - 1, -1):
        if i + 1 != cache.depth and i + 1 in pending:
            extra = pending[i + 1]
            if dx is None:
                dx = extra
            else:
                dx = dx + extra
                ctr.elementwise(extra.size, K.ADD)
        dx = _layer_backward(store, i, cache.layers[i], dx, b, t, store.arch.heads, trainable, grads, ctr)
    # embedding gradients exist only in pretraining, which the cost model does not cover
    if "emb.tok" in trainable:
        g = np.zeros_like(store["emb.tok"])
        np.add.at(g, cache.tokens.reshape(-1), dx)
        grads["emb.tok"] = g
    if "emb.pos" in trainable:
        g = np.zeros_like(store["emb.pos"])
        g[:t] = dx.reshape(b, t, -1).sum(0)
        grads["emb.pos"] = g
    return grads


def cross_entropy(logits: np.ndarray, targets: np.ndarray, counters: Optional[Counters] = None):
    """Mean token cross-entropy and its gradient w.r.t. the logits."""
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    tg = np.asarray(targets).reshape(-1)
    if tg.size and (tg.min() < 0 or tg.max() >= v):
        raise ConfigError(f"target id out of range [0, {v})")
    shifted = flat - flat.max(1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(1, keepdims=True)
    rows = np.arange(flat.shape[0])
    loss = float(np.mean(np.log(z[:, 0]) - shifted[rows, tg]))
    grad = e / z
    grad[rows, tg] -= 1.0
    grad /= flat.shape[0]
    if counters is not None:
        counters.elementwise(flat.size, K.CROSS_ENTROPY)
        counters.elementwise(flat.size, K.CROSS_ENTROPY)
    return loss, grad.reshape(logits.shape)


def loss_and_grads(
    store: ParameterStore,
    tokens: np.ndarray,
    targets: np.ndarray,
    trainable: Iterable[str],
    *,
    exits=None,
    counters: Optional[Counters] = None,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
):
    """Summed cross-entropy over active exits plus gradients of trainable tensors."""
    ctr = counters if counters is not None else Counters(store.arch.scalar_bytes)
    out, cache = forward(store, tokens, trainable=trainable, exits=exits, counters=ctr, dropout=dropout, rng=rng)
    total = 0.0
    dlogits = {}
    for depth, lg in out.items():
        loss, dl = cross_entropy(lg, targets, ctr)
        total += loss
        dlogits[depth] = dl
    if not np.isfinite(total):
        raise NumericalError(f"non-finite training loss {total}")
    return total, backward(cache, dlogits)


def grad_check(
    store: ParameterStore,
    tokens: np.ndarray,
    targets: np.ndarray,
    trainable: Iterable[str],
    *,
    exits=None,
    eps: float = 1e-3,
    samples: int = 50,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error of analytic gradients vs central differences on sampled coordinates."""
    if store.dtype != np.float64:
        raise ConfigError("grad_check needs a float64 store")
    rng = rng if rng is not None else np.random.default_rng(0)
    trainable = [n for n in store.names() if n in set(trainable)]
    _, grads = loss_and_grads(store, tokens, targets, trainable, exits=exits)
    sizes = np.array([store[n].size for n in trainable])
    flat_ids = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fid in sorted(int(f) for f in flat_ids):
        j = int(np.searchsorted(offsets, fid, side="right") - 1)
        name, local = trainable[j], fid - offsets[j]
        # index the stored array itself; reshape of a non-contiguous view would copy
        arr = store[name]
        pos = np.unravel_index(local, arr.shape)
        orig = arr[pos]
        loss_at = {}
        for k in (-2, -1, 1, 2):
            arr[pos] = orig + k * eps
            loss_at[k] = _total_loss(store, tokens, targets, exits)
        arr[pos] = orig
        # five-point central stencil: truncation error O(eps^4)
        numeric = (8 * (loss_at[1] - loss_at[-1]) - (loss_at[2] - loss_at[-2])) / (12 * eps)
        analytic = float(grads[name].reshape(-1)[local])
        denom = max(abs(numeric), abs(analytic), GRAD_CHECK_FLOOR)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def _total_loss(store, tokens, targets, exits):
    out, _ = forward(store, tokens, exits=exits)
    return sum(cross_entropy(lg, targets)[0] for lg in out.values())
