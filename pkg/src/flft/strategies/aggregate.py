"""Server-side aggregation.

Every strategy uses one participation-weighted convex rule per coordinate::

    new = (1/N) * sum_j W_j + (1 - k/N) * old  ==  old + (1/N) * sum_j (W_j - old)

where ``k`` clients cover the coordinate. Sums run in float64 in client-id
order, so a round where every client returns what it received is a bitwise
fixed point and arrival order never matters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from flft.errors import ConfigError
from flft.nn.store import ParameterStore
from flft.nn.variants import SubsetSpec, subset_coordinates


def serialize_payload(tensors: dict) -> bytes:
    """Raw little-endian float32 data of the uploaded tensors in name order."""
    return b"".join(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes() for n in sorted(tensors))


@dataclass
class ClientUpdate:
    client: int
    round: int
    tensors: dict
    knob: object = None
    subset: Optional[SubsetSpec] = None
    loss: float = float("nan")
    flops: int = 0
    trace: tuple = ()  # per-step width levels (FjORD)
    upload_bytes: int = field(default=-1)

    def __post_init__(self):
        if self.upload_bytes < 0:
            self.upload_bytes = len(serialize_payload(self.tensors))


def _check(updates: Sequence[ClientUpdate], n: int, round_: Optional[int]):
    ids = [u.client for u in updates]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate client in aggregation")
    if n < len(updates):
        raise ConfigError(f"N={n} smaller than the {len(updates)} contributors")
    if round_ is not None and any(u.round != round_ for u in updates):
        raise ConfigError(f"update from a round other than {round_}")
    return sorted(updates, key=lambda u: u.client)


def aggregate_coordinates(
    global_store: ParameterStore,
    contributions: Sequence[dict],
    n: int,
) -> ParameterStore:
    """Core convex rule. ``contributions`` holds, per client in id order, ``name -> (values, coords)``.

    ``coords`` is ``None`` for a full tensor or an index object into the global tensor.
    """
    acc: dict = {}
    cover: dict = {}
    for contrib in contributions:
        for name, (values, coords) in contrib.items():
            if name not in global_store:
                raise ConfigError(f"update carries unknown tensor {name}")
            old = global_store[name]
            if name not in acc:
                acc[name] = np.zeros(old.shape, dtype=np.float64)
                cover[name] = np.zeros(old.shape, dtype=np.int64)
            ref = old if coords is None else old[coords]
            if np.shape(values) != ref.shape:
                raise ConfigError(f"shape mismatch for {name}: {np.shape(values)} vs {ref.shape}")
            delta = np.asarray(values, dtype=np.float64) - ref
            if coords is None:
                acc[name] += delta
                cover[name] += 1
            else:
                acc[name][coords] += delta
                cover[name][coords] += 1
    out = ParameterStore(global_store.arch, dict(global_store.tensors))
    for name, total in acc.items():
        if cover[name].max() > n:
            raise ConfigError(f"{cover[name].max()} contributors for {name} exceed N={n}")
        old = global_store[name]
        out[name] = (old.astype(np.float64) + total / n).astype(old.dtype)
    return out


def aggregate_layerft(global_store, updates, n, round_=None) -> ParameterStore:
    """Layer-wise averaging: each uploaded tensor is mixed in by the convex rule; absent layers stay."""
    ups = _check(updates, n, round_)
    return aggregate_coordinates(global_store, [{k: (v, None) for k, v in u.tensors.items()} for u in ups], n)


# held layers and exit heads are plain full tensors, so the same rule applies
aggregate_depthfl = aggregate_layerft


def _lora_coords(name, values, global_store):
    gshape = global_store[name].shape
    if name.endswith(".lora_a") and values.shape != gshape:
        if values.shape[1] > gshape[1]:
            raise ConfigError(f"adapter rank {values.shape[1]} exceeds server rank {gshape[1]}")
        return np.s_[:, : values.shape[1]]
    if name.endswith(".lora_b") and values.shape != gshape:
        if values.shape[0] > gshape[0]:
            raise ConfigError(f"adapter rank {values.shape[0]} exceeds server rank {gshape[0]}")
        return np.s_[: values.shape[0], :]
    return None


def aggregate_hetlora(global_store, updates, n, round_=None) -> ParameterStore:
    """Nested rank slices: a rank-z client covers the first z rank columns/rows of each adapter."""
    ups = _check(updates, n, round_)
    contribs = [
        {k: (v, _lora_coords(k, v, global_store)) for k, v in u.tensors.items()} for u in ups
    ]
    return aggregate_coordinates(global_store, contribs, n)


def aggregate_subset(global_store, updates, n, round_=None) -> ParameterStore:
    """Coordinate-coverage averaging for HeteroFL, FjORD and FedRolex sub-models."""
    ups = _check(updates, n, round_)
    contribs = []
    for u in ups:
        if u.subset is None:
            raise ConfigError(f"client {u.client} sent a sub-model without index sets")
        coords = subset_coordinates(global_store, u.subset)
        contribs.append({k: (v, coords[k]) for k, v in u.tensors.items()})
    return aggregate_coordinates(global_store, contribs, n)


def aggregate_fedhm(global_store, updates, n, broadcast: dict, round_=None) -> ParameterStore:
    """Dense global update from factorized and full-rank clients.

    A factorized client's matrix enters as ``old + (U_j V_j - U_0 V_0)``, where
    ``U_0 V_0`` is the factor pair it received (``broadcast[rank]`` holds the
    sent store per rank). Clients returning untouched factors therefore leave
    the global matrix bitwise unchanged.
    """
    ups = _check(updates, n, round_)
    contribs = []
    for u in ups:
        c = {}
        for name, values in u.tensors.items():
            if name.endswith(".v"):
                continue
            if name.endswith(".u"):
                base = name[:-1]
                sent = broadcast[u.knob]
                recon = np.asarray(values, np.float64) @ np.asarray(u.tensors[base + "v"], np.float64)
                recon0 = sent[base + "u"].astype(np.float64) @ sent[base + "v"].astype(np.float64)
                c[base + "w"] = (global_store[base + "w"].astype(np.float64) + (recon - recon0), None)
            else:
                c[name] = (values, None)
        contribs.append(c)
    return aggregate_coordinates(global_store, contribs, n)
