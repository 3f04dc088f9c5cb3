"""Character tokenization, client partitioning, batch sampling and a synthetic classification task."""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from flft.errors import ConfigError

VOCAB = 128
UNK = 0
UNK_CHAR = "�"
BUNDLED = ("britannica", "shakespeare")
# printable ASCII symbols used by the synthetic classification task
SYMBOLS = np.arange(33, 127)


def tokenize_char(text: str) -> np.ndarray:
    """Code points 1..127 map to themselves; anything else maps to ``UNK``."""
    ids = np.frombuffer(text.encode("utf-32-le"), dtype="<u4").astype(np.int64)
    ids[(ids >= VOCAB) | (ids == 0)] = UNK
    return ids


def detokenize(ids) -> str:
    return "".join(UNK_CHAR if i == UNK else chr(i) for i in np.asarray(ids).tolist())


def corpus_path(name_or_path: str) -> Path:
    """Bundled corpus by short name, or a filesystem path."""
    if name_or_path in BUNDLED:
        return Path(str(resources.files("flft") / "corpus" / f"{name_or_path}.txt"))
    return Path(name_or_path)


def load_corpus(name_or_path: str) -> np.ndarray:
    path = corpus_path(name_or_path)
    if not path.is_file():
        raise ConfigError(f"corpus not found: {path}")
    return tokenize_char(path.read_text(encoding="utf-8"))


def split_tokens(tokens: np.ndarray, eval_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous train/held-out split; the held-out part is the corpus tail."""
    if not 0 < eval_fraction < 1:
        raise ConfigError(f"eval_fraction {eval_fraction} outside (0, 1)")
    cut = len(tokens) - int(round(len(tokens) * eval_fraction))
    return tokens[:cut], tokens[cut:]


# --- shards and partitions --------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledSet:
    inputs: np.ndarray  # n x T token ids
    labels: np.ndarray  # n
    num_classes: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ConfigError("inputs and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "LabeledSet":
        return LabeledSet(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class Shard:
    client: int
    tokens: Optional[np.ndarray] = None  # next-token task
    indices: Optional[np.ndarray] = None  # rows of a LabeledSet

    def __len__(self) -> int:
        return len(self.tokens) if self.tokens is not None else len(self.indices)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "equal"  # equal | dirichlet | constraint_correlated
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("equal", "dirichlet", "constraint_correlated"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.mode != "equal" and not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")


def partition_equal(tokens: np.ndarray, num_clients: int, context: int = 0) -> list[Shard]:
    """Contiguous segments whose lengths differ by at most one; earlier shards take the remainder."""
    n = len(tokens)
    if num_clients < 1 or n < num_clients * (context + 1):
        raise ConfigError(f"corpus of {n} tokens too small for {num_clients} clients at context {context}")
    base, extra = divmod(n, num_clients)
    shards, start = [], 0
    for c in range(num_clients):
        size = base + (1 if c < extra else 0)
        shards.append(Shard(c, tokens=tokens[start:start + size]))
        start += size
    return shards


def largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` proportional to ``weights`` (ties to lower index)."""
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _dirichlet(rng, alpha: float, k: int) -> np.ndarray:
    if math.isinf(alpha):
        return np.full(k, 1.0 / k)
    p = rng.dirichlet(np.full(k, alpha))
    # tiny alphas can underflow every component
    return p if p.sum() > 0 else np.eye(k)[rng.integers(k)]


def _class_members(data: LabeledSet, rng) -> list[np.ndarray]:
    out = []
    for k in range(data.num_classes):
        idx = np.flatnonzero(data.labels == k)
        if len(idx) == 0:
            raise ConfigError(f"class {k} has no examples")
        out.append(rng.permutation(idx))
    return out


def _assign(members, weights_per_class, num_clients) -> list[Shard]:
    buckets = [[] for _ in range(num_clients)]
    for idx, w in zip(members, weights_per_class):
        counts = largest_remainder(len(idx), w)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for c in range(num_clients):
            buckets[c].append(idx[bounds[c]:bounds[c + 1]])
    return [Shard(c, indices=np.sort(np.concatenate(b))) for c, b in enumerate(buckets)]


def partition_dirichlet(data: LabeledSet, num_clients: int, alpha: float, seed: int) -> list[Shard]:
    rng = _rng(seed, 0xD1)
    members = _class_members(data, rng)
    weights = [_dirichlet(rng, alpha, num_clients) for _ in members]
    return _assign(members, weights, num_clients)


def partition_constraint_correlated(
    data: LabeledSet, groups: Sequence[int], alpha: float, seed: int, leak: float = 0.05
) -> tuple[list[Shard], np.ndarray]:
    """Classes split into contiguous blocks, one per device group (group 0 = weakest).

    A class sends ``1 - leak`` of its examples to its own group and spreads ``leak``
    evenly over the others; inside a group, shares follow Dirichlet(alpha).
    Returns the shards and the weak group's class-occurrence distribution.
    """
    groups = np.asarray(groups)
    num_groups = int(groups.max()) + 1 if len(groups) else 0
    if num_groups < 1 or data.num_classes < num_groups:
        raise ConfigError(f"{data.num_classes} classes cannot be split over {num_groups} groups")
    members_of = [np.flatnonzero(groups == g) for g in range(num_groups)]
    if any(len(m) == 0 for m in members_of):
        raise ConfigError("every device group needs at least one device")
    affiliation = np.concatenate([
        np.full(len(block), g) for g, block in enumerate(np.array_split(np.arange(data.num_classes), num_groups))
    ])
    rng = _rng(seed, 0xC0)
    members = _class_members(data, rng)
    weights = []
    for k in range(data.num_classes):
        w = np.zeros(len(groups))
        for g, devs in enumerate(members_of):
            if num_groups == 1:
                share = 1.0
            else:
                share = 1.0 - leak if g == affiliation[k] else leak / (num_groups - 1)
            w[devs] = share * _dirichlet(rng, alpha, len(devs))
        weights.append(w)
    shards = _assign(members, weights, len(groups))
    weak = np.concatenate([shards[c].indices for c in members_of[0]])
    hist = np.bincount(data.labels[weak], minlength=data.num_classes).astype(np.float64)
    return shards, hist / hist.sum()


# --- sampling ---------------------------------------------------------------------------------


def sample_window(tokens: np.ndarray, context: int, rng: np.random.Generator):
    """Uniform random window of ``context`` inputs with next-token targets."""
    if len(tokens) < context + 1:
        raise ConfigError(f"shard of {len(tokens)} tokens shorter than context + 1 = {context + 1}")
    s = int(rng.integers(0, len(tokens) - context))
    return tokens[s:s + context], tokens[s + 1:s + context + 1]


def sample_batch(tokens: np.ndarray, batch: int, context: int, rng: np.random.Generator):
    if len(tokens) < context + 1:
        raise ConfigError(f"shard of {len(tokens)} tokens shorter than context + 1 = {context + 1}")
    starts = rng.integers(0, len(tokens) - context, size=batch)
    offs = np.arange(context)
    return tokens[starts[:, None] + offs], tokens[starts[:, None] + offs + 1]


def sample_labeled(data: LabeledSet, indices: np.ndarray, batch: int, rng: np.random.Generator):
    """Mini-batch with replacement from a client's rows; targets repeat the label at every position."""
    if len(indices) == 0:
        raise ConfigError("empty shard")
    rows = indices[rng.integers(0, len(indices), size=batch)]
    x = data.inputs[rows]
    return x, np.repeat(data.labels[rows][:, None], x.shape[1], axis=1)


def eval_windows(tokens: np.ndarray, context: int, limit: Optional[int] = None):
    """Non-overlapping windows covering the held-out tokens, in order."""
    n = (len(tokens) - 1) // context
    if limit is not None:
        n = min(n, limit)
    if n < 1:
        raise ConfigError("held-out split shorter than one window")
    idx = np.arange(n)[:, None] * context + np.arange(context)
    return tokens[idx], tokens[idx + 1]


# --- synthetic classification -----------------------------------------------------------------


def gen_synth_classification(
    num_classes: int, per_class: int, length: int, seed: int, signal: float = 0.5, motif: int = 6
) -> LabeledSet:
    """Token sequences whose symbols come from a class motif with probability ``signal``.

    Each class owns a disjoint set of ``motif`` symbols; other positions draw
    uniformly from the full printable table. ``signal=1`` gives maximally
    separated classes.
    """
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if num_classes * motif > len(SYMBOLS):
        raise ConfigError(f"{num_classes} classes x {motif} motif symbols exceed the symbol table")
    if not 0 <= signal <= 1:
        raise ConfigError(f"signal {signal} outside [0, 1]")
    rng = _rng(seed, 0x5C)
    motifs = rng.permutation(SYMBOLS)[: num_classes * motif].reshape(num_classes, motif)
    labels = np.repeat(np.arange(num_classes), per_class)
    n = len(labels)
    background = rng.choice(SYMBOLS, size=(n, length))
    from_motif = rng.random((n, length)) < signal
    picks = motifs[labels[:, None], rng.integers(0, motif, size=(n, length))]
    inputs = np.where(from_motif, picks, background)
    order = rng.permutation(n)
    return LabeledSet(inputs[order].astype(np.int64), labels[order], num_classes)


def export_labeled(data: LabeledSet) -> str:
    return "".join(
        f"{int(y)}\t{' '.join(str(int(t)) for t in x)}\n" for x, y in zip(data.inputs, data.labels)
    )


def import_labeled(text: str, num_classes: Optional[int] = None) -> LabeledSet:
    rows, labels = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            label, ids = line.split("\t")
            labels.append(int(label))
            rows.append([int(t) for t in ids.split()])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: expected 'label<TAB>ids'") from exc
    if len({len(r) for r in rows}) > 1:
        raise ConfigError("examples differ in length")
    labels = np.array(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledSet(np.array(rows, dtype=np.int64), labels, k)


def stratified_split(data: LabeledSet, eval_per_class: int) -> tuple[LabeledSet, LabeledSet]:
    """The first ``eval_per_class`` rows of every class form the held-out set."""
    held = []
    for k in range(data.num_classes):
        idx = np.flatnonzero(data.labels == k)
        if len(idx) <= eval_per_class:
            raise ConfigError(f"class {k} has {len(idx)} examples, need more than {eval_per_class}")
        held.append(idx[:eval_per_class])
    held = np.sort(np.concatenate(held))
    mask = np.ones(len(data), dtype=bool)
    mask[held] = False
    return data.take(np.flatnonzero(mask)), data.take(held)
