"""Parameter storage, initialization and the FLFT checkpoint format."""

from __future__ import annotations

import os
import re
import struct
import tempfile
from dataclasses import replace
from typing import Iterable, Iterator, Optional

import numpy as np

from flft.arch import ArchitectureDescriptor
from flft.errors import ConfigError

MAGIC = b"FLFT"
FORMAT_VERSION = 1

LINEAR_NAMES = ("qkv", "attn_out", "ffn_in", "ffn_out")
_LAYER_RE = re.compile(r"^layers\.(\d+)\.")


def layer_prefix(i: int) -> str:
    return f"layers.{i}."


def exit_prefix(depth: int, num_layers: int) -> str:
    """Parameter prefix of the exit head that reads the output of layer ``depth`` (1-based count)."""
    return "head." if depth == num_layers else f"exits.{depth}."


class ParameterStore:
    """Named arrays of one model replica.

    ``arch`` always describes the full-size architecture; width-sliced or
    factorized replicas keep the same descriptor and differ only in tensor shapes.
    """

    def __init__(self, arch: ArchitectureDescriptor, tensors: Optional[dict] = None):
        self.arch = arch
        self.tensors: dict[str, np.ndarray] = dict(tensors or {})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def get(self, name, default=None):
        return self.tensors.get(name, default)

    def pop(self, name):
        return self.tensors.pop(name)

    @property
    def dtype(self):
        return self.tensors["emb.tok"].dtype

    @property
    def embed_dim(self) -> int:
        return self.tensors["emb.tok"].shape[1]

    @property
    def num_layers(self) -> int:
        idx = {int(m.group(1)) for n in self.tensors if (m := _LAYER_RE.match(n))}
        return max(idx) + 1 if idx else 0

    def layer_names(self, i: int) -> list[str]:
        p = layer_prefix(i)
        return [n for n in self.tensors if n.startswith(p)]

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def subset(self, names: Iterable[str]) -> dict:
        return {n: self.tensors[n] for n in names}

    def num_scalars(self, names: Optional[Iterable[str]] = None) -> int:
        names = self.tensors if names is None else names
        return int(sum(self.tensors[n].size for n in names))

    def bitwise_equal(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def init_params(
    arch: ArchitectureDescriptor, rng: np.random.Generator, dtype=np.float32, std: float = 0.02
) -> ParameterStore:
    d, hid, v = arch.embed_dim, arch.hidden, arch.vocab
    proj_std = std / np.sqrt(2 * arch.layers)
    t = {
        "emb.tok": rng.normal(0, std, (v, d)),
        "emb.pos": rng.normal(0, std, (arch.context, d)),
    }
    for i in range(arch.layers):
        p = layer_prefix(i)
        t[p + "ln1.g"] = np.ones(d)
        t[p + "ln1.b"] = np.zeros(d)
        t[p + "qkv.w"] = rng.normal(0, std, (d, 3 * d))
        t[p + "qkv.b"] = np.zeros(3 * d)
        t[p + "attn_out.w"] = rng.normal(0, proj_std, (d, d))
        t[p + "attn_out.b"] = np.zeros(d)
        t[p + "ln2.g"] = np.ones(d)
        t[p + "ln2.b"] = np.zeros(d)
        t[p + "ffn_in.w"] = rng.normal(0, std, (d, hid))
        t[p + "ffn_in.b"] = np.zeros(hid)
        t[p + "ffn_out.w"] = rng.normal(0, proj_std, (hid, d))
        t[p + "ffn_out.b"] = np.zeros(d)
    t.update(init_head(d, arch.out_dim, rng, "head.", std))
    return ParameterStore(arch, {k: np.asarray(a, dtype=dtype) for k, a in t.items()})


def init_head(d: int, vocab: int, rng: np.random.Generator, prefix: str, std: float = 0.02) -> dict:
    return {
        prefix + "ln.g": np.ones(d),
        prefix + "ln.b": np.zeros(d),
        prefix + "out.w": rng.normal(0, std, (d, vocab)),
        prefix + "out.b": np.zeros(vocab),
    }


def replace_head(store: ParameterStore, out_dim: int, rng: np.random.Generator) -> ParameterStore:
    """New store with a freshly initialized output head of width ``out_dim`` (e.g. a class count)."""
    new = store.copy()
    new.arch = replace(store.arch, num_outputs=None if out_dim == store.arch.vocab else out_dim)
    fresh = init_head(store.embed_dim, out_dim, rng, "head.")
    for k, v in fresh.items():
        new[k] = np.asarray(v, dtype=store.dtype)
    return new


# --- checkpoint I/O -------------------------------------------------------------------------


def encode_checkpoint(store: ParameterStore) -> bytes:
    a = store.arch
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<6I", a.layers, a.embed_dim, a.heads, a.ffn_mult, a.vocab, a.context))
    parts.append(struct.pack("<I", len(store)))
    for name, arr in store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> ParameterStore:
    try:
        return _decode(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"corrupt checkpoint: {exc}") from exc


def _decode(blob: bytes) -> ParameterStore:
    if blob[:4] != MAGIC:
        raise ConfigError("not an FLFT checkpoint (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    l, d, h, f, v, t = struct.unpack_from("<6I", blob, off)
    off += 24
    arch = ArchitectureDescriptor(layers=l, embed_dim=d, heads=h, ffn_mult=f, vocab=v, context=t)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
        off += 4 * n
    if off != len(blob):
        raise ConfigError("trailing bytes in checkpoint")
    head = tensors.get("head.out.w")
    if head is not None and head.shape[1] != v:
        arch = replace(arch, num_outputs=head.shape[1])
    return ParameterStore(arch, tensors)


def atomic_write_bytes(path: str, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, store: ParameterStore):
    atomic_write_bytes(path, encode_checkpoint(store))


def load_checkpoint(path: str) -> ParameterStore:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
