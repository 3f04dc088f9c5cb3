"""Store transforms for the training variants: LoRA, low-rank factors, width subsets, exit heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from flft.errors import ConfigError
from flft.nn.store import LINEAR_NAMES, ParameterStore, exit_prefix, layer_prefix
from flft.nn.svd import jacobi_svd, svd_factorize


def block_linear_prefixes(num_layers: int) -> list[str]:
    return [layer_prefix(i) + n + "." for i in range(num_layers) for n in LINEAR_NAMES]


# --- LoRA -------------------------------------------------------------------------------------


def add_lora(store: ParameterStore, rank: int, rng: np.random.Generator, std: float = 0.02) -> ParameterStore:
    """Copy of ``store`` with a rank-``rank`` adapter pair on every block linear (up-projection zero)."""
    out = store.copy()
    for p in block_linear_prefixes(store.num_layers):
        pin, q = store[p + "w"].shape
        if not 1 <= rank <= min(pin, q):
            raise ConfigError(f"LoRA rank {rank} outside [1, {min(pin, q)}] for {p}w")
        out[p + "lora_a"] = rng.normal(0, std, (pin, rank)).astype(store.dtype)
        out[p + "lora_b"] = np.zeros((rank, q), dtype=store.dtype)
    return out


def lora_rank(store: ParameterStore) -> int:
    return store[layer_prefix(0) + "qkv.lora_a"].shape[1]


def slice_lora(store: ParameterStore, rank: int) -> ParameterStore:
    """Nested rank slice: first ``rank`` columns of each down matrix, first rows of each up matrix."""
    if not 1 <= rank <= lora_rank(store):
        raise ConfigError(f"rank {rank} exceeds adapter rank {lora_rank(store)}")
    out = ParameterStore(store.arch, dict(store.tensors))
    for name in store:
        if name.endswith(".lora_a"):
            out[name] = store[name][:, :rank].copy()
        elif name.endswith(".lora_b"):
            out[name] = store[name][:rank].copy()
    return out


def lora_trainable(store: ParameterStore) -> list[str]:
    """Adapters, every norm and the output head."""
    return [
        n for n in store
        if n.endswith((".lora_a", ".lora_b")) or ".ln" in n or n.startswith("head.")
    ]


# --- low-rank factorization -------------------------------------------------------------------


def store_svds(store: ParameterStore) -> dict:
    """Full SVD of every dense block linear, keyed by weight name; computed once, truncated per rank."""
    out = {}
    for p in block_linear_prefixes(store.num_layers):
        w = store[p + "w"]
        out[p + "w"] = jacobi_svd(w)
    return out


def factorize_store(store: ParameterStore, rank: int, svds: Optional[dict] = None) -> ParameterStore:
    """Replace every block linear weight ``w`` by factors ``u`` (P x z) and ``v`` (z x Q)."""
    out = ParameterStore(store.arch, {})
    for name, arr in store.items():
        if name.endswith(".w") and name.startswith("layers."):
            f = svd_factorize(arr, rank, None if svds is None else svds[name])
            out[name[:-1] + "u"] = np.ascontiguousarray(f.left)
            out[name[:-1] + "v"] = np.ascontiguousarray(f.right)
        else:
            out[name] = arr.copy()
    return out


def reconstruct_store(store: ParameterStore) -> ParameterStore:
    """Dense store with every factor pair multiplied back together."""
    out = ParameterStore(store.arch, {})
    for name, arr in store.items():
        if name.endswith(".u"):
            out[name[:-1] + "w"] = (arr.astype(np.float64) @ store[name[:-1] + "v"]).astype(arr.dtype)
        elif not name.endswith(".v"):
            out[name] = arr.copy()
    return out


# --- width subsets ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SubsetSpec:
    scale: float
    embed_index: np.ndarray  # kept embedding dims (I_D)
    hidden_index: np.ndarray  # kept FFN hidden units (I_H)

    def __post_init__(self):
        for arr in (self.embed_index, self.hidden_index):
            if len(arr) == 0 or len(np.unique(arr)) != len(arr):
                raise ConfigError("index sets must be non-empty and duplicate free")


def _embed_width(store: ParameterStore) -> int:
    # optimizer moment stores carry no embeddings, so fall back to a norm vector
    for name in ("emb.tok", layer_prefix(0) + "ln1.g", "head.ln.g"):
        if name in store:
            return store[name].shape[-1]
    raise ConfigError("cannot infer the embedding width of the store")


def subset_index_map(store: ParameterStore, spec: SubsetSpec) -> dict:
    """Per-tensor index tuples selecting the sub-model coordinates of a full-size store."""
    d = _embed_width(store)
    ffn = store.get(layer_prefix(0) + "ffn_in.b")
    hid = store.arch.ffn_mult * d if ffn is None else ffn.shape[0]
    ed, hd = np.asarray(spec.embed_index), np.asarray(spec.hidden_index)
    if ed.max() >= d or ed.min() < 0 or hd.max() >= hid or hd.min() < 0:
        raise ConfigError("subset index out of bounds")
    if len(ed) < store.arch.heads:
        raise ConfigError(f"{len(ed)} embedding dims cannot hold {store.arch.heads} heads")
    qkv = np.concatenate([ed, d + ed, 2 * d + ed])
    full = slice(None)
    out = {}
    for name, arr in store.items():
        leaf = name.rsplit(".", 2)
        kind = leaf[-2] if len(leaf) >= 2 else ""
        if name.startswith("emb."):
            out[name] = (full, ed)
        elif kind in ("ln1", "ln2", "ln") or name.endswith(("attn_out.b", "ffn_out.b")):
            out[name] = (ed,)
        elif name.endswith("qkv.w"):
            out[name] = (ed, qkv)
        elif name.endswith("qkv.b"):
            out[name] = (qkv,)
        elif name.endswith("attn_out.w"):
            out[name] = (ed, ed)
        elif name.endswith("ffn_in.w"):
            out[name] = (ed, hd)
        elif name.endswith("ffn_in.b"):
            out[name] = (hd,)
        elif name.endswith("ffn_out.w"):
            out[name] = (hd, ed)
        elif name.endswith("out.w"):
            out[name] = (ed, full)
        elif name.endswith("out.b"):
            out[name] = (full,)
        else:
            raise ConfigError(f"subset extraction does not support tensor {name}")
    return out


def _index(arr, idx):
    if len(idx) == 1:
        return idx
    rows, cols = (np.arange(n) if isinstance(ix, slice) else ix for ix, n in zip(idx, arr.shape))
    return np.ix_(rows, cols)


def subset_coordinates(full: ParameterStore, spec: SubsetSpec) -> dict:
    """Index objects addressing each tensor of ``full`` at the sub-model coordinates."""
    return {n: _index(full[n], ix) for n, ix in subset_index_map(full, spec).items()}


def subset_extract(store: ParameterStore, spec: SubsetSpec) -> ParameterStore:
    coords = subset_coordinates(store, spec)
    return ParameterStore(store.arch, {n: a[coords[n]].copy() for n, a in store.items()})


def subset_embed(sub: ParameterStore, full: ParameterStore, spec: SubsetSpec) -> ParameterStore:
    """Copy of ``full`` with the sub-model values written back to their coordinates."""
    out = full.copy()
    coords = subset_coordinates(full, spec)
    for name, arr in sub.items():
        if out[name][coords[name]].shape != arr.shape:
            raise ConfigError(f"shape mismatch embedding {name}")
        out[name][coords[name]] = arr
    return out


# --- early exits ------------------------------------------------------------------------------


def add_exit_heads(store: ParameterStore, depths) -> ParameterStore:
    """Copy of ``store`` with an exit head after each given depth, initialized from the final head."""
    out = store.copy()
    for e in depths:
        if not 1 <= e <= store.arch.layers:
            raise ConfigError(f"exit depth {e} outside [1, {store.arch.layers}]")
        hp = exit_prefix(e, store.arch.layers)
        if hp == "head.":
            continue
        for leaf in ("ln.g", "ln.b", "out.w", "out.b"):
            out[hp + leaf] = store["head." + leaf].copy()
    return out


def truncate_to_depth(store: ParameterStore, depth: int) -> ParameterStore:
    """Layers below ``depth`` plus the exit head reading layer ``depth`` (a shallow client replica)."""
    hp = exit_prefix(depth, store.arch.layers)
    keep = {}
    for name, arr in store.items():
        if name.startswith("emb.") or name.startswith(hp):
            keep[name] = arr.copy()
        elif name.startswith("layers.") and int(name.split(".", 2)[1]) < depth:
            keep[name] = arr.copy()
    return ParameterStore(store.arch, keep)
