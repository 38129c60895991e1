"""Synthetic planted-interest dataset: generator, file format, batch stream.

Each user owns a few item clusters and walks over them with a drift
probability per step, emitting items uniformly from the active cluster
(or, with a noise probability, from anywhere).  The ground-truth cluster
walk is stored for diagnostics only and is typed separately from the
records the model is allowed to see.

Datasets serialize as newline-delimited JSON (one trace per line) next to
a manifest that echoes the resolved world spec.  Generation is a pure
function of (spec, seed): per-user streams derive their own seeds.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .embedding import InteractionRecord
from .errors import ConfigError, DataError

SCHEMA_VERSION = 1
TRACE_KEYS = {"user", "items", "watch", "dur", "tags", "labels", "clusters"}


@dataclass(frozen=True)
class WorldSpec:
    """Parameters of the planted-interest world.

    Items partition into contiguous clusters; ``cluster_sizes`` defaults to
    an even split but may be skewed (niche vs. mainstream interests).
    """

    item_count: int = 10000
    cluster_count: int = 8
    user_count: int = 1000
    interests_per_user: int = 4
    drift_prob: float = 0.2
    noise_prob: float = 0.05
    trace_len_min: int = 65
    trace_len_max: int = 65
    cluster_sizes: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.cluster_sizes is None:
            if self.item_count % self.cluster_count != 0:
                raise ConfigError(
                    f"item_count {self.item_count} must be divisible by cluster_count {self.cluster_count}"
                )
        else:
            object.__setattr__(self, "cluster_sizes", tuple(int(s) for s in self.cluster_sizes))
            if len(self.cluster_sizes) != self.cluster_count:
                raise ConfigError(f"cluster_sizes needs {self.cluster_count} entries, got {len(self.cluster_sizes)}")
            if any(s < 1 for s in self.cluster_sizes):
                raise ConfigError("cluster sizes must be positive")
            if sum(self.cluster_sizes) != self.item_count:
                raise ConfigError(
                    f"cluster_sizes sum to {sum(self.cluster_sizes)}, item_count is {self.item_count}"
                )
        if not 1 <= self.interests_per_user <= self.cluster_count:
            raise ConfigError(f"interests_per_user must be in [1, {self.cluster_count}]")
        for name in ("drift_prob", "noise_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if self.trace_len_min < 2 or self.trace_len_max < self.trace_len_min:
            raise ConfigError("trace lengths must satisfy 2 <= min <= max")

    @property
    def sizes(self) -> np.ndarray:
        if self.cluster_sizes is not None:
            return np.asarray(self.cluster_sizes, dtype=np.int64)
        return np.full(self.cluster_count, self.item_count // self.cluster_count, dtype=np.int64)

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.sizes)))

    def cluster_of(self, item_id) -> int | np.ndarray:
        idx = np.searchsorted(self.starts, item_id, side="right") - 1
        return idx if isinstance(item_id, np.ndarray) else int(idx)


@dataclass
class Trace:
    """One user's chronological interactions, as column arrays."""

    user: int
    items: np.ndarray
    watch: np.ndarray
    dur: np.ndarray
    tags: np.ndarray
    labels: np.ndarray
    clusters: np.ndarray  # diagnostics only; never reaches the model

    def __len__(self) -> int:
        return len(self.items)

    def history_columns(self, start: int, stop: int) -> dict[str, np.ndarray]:
        return {
            "items": self.items[start:stop],
            "watch": self.watch[start:stop],
            "dur": self.dur[start:stop],
            "tags": self.tags[start:stop],
            "labels": self.labels[start:stop],
        }

    def records(self, start: int, stop: int) -> list[InteractionRecord]:
        out = []
        for i in range(start, stop):
            flags = tuple(f for f in range(3) if (int(self.labels[i]) >> f) & 1)
            out.append(
                InteractionRecord(
                    item_id=int(self.items[i]),
                    watch_time=float(self.watch[i]),
                    duration=float(self.dur[i]),
                    tag_id=int(self.tags[i]),
                    labels=flags,
                )
            )
        return out


@dataclass
class Example:
    """A training/eval pair: the history columns and the held-out next item."""

    trace: Trace
    start: int
    stop: int  # history is [start, stop); held_out is trace item at ``stop``

    @property
    def held_out(self) -> int:
        return int(self.trace.items[self.stop])

    @property
    def length(self) -> int:
        return self.stop - self.start

    def columns(self) -> dict[str, np.ndarray]:
        return self.trace.history_columns(self.start, self.stop)


@dataclass
class TrainingBatch:
    examples: list[Example]

    def __post_init__(self):
        if len(self.examples) < 2:
            raise DataError(f"a training batch needs >= 2 examples, got {len(self.examples)}")

    @property
    def size(self) -> int:
        return len(self.examples)

    @property
    def positives(self) -> np.ndarray:
        return np.asarray([ex.held_out for ex in self.examples], dtype=np.int64)


def _user_rng(spec: WorldSpec, user: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0, user])))


def generate_trace(spec: WorldSpec, user: int) -> Trace:
    rng = _user_rng(spec, user)
    n = int(rng.integers(spec.trace_len_min, spec.trace_len_max + 1))
    owned = np.sort(rng.choice(spec.cluster_count, size=spec.interests_per_user, replace=False))

    # Markov walk over owned clusters: accumulated jumps stay uniform over
    # the other owned clusters at every switch.
    o = len(owned)
    switches = rng.random(n) < spec.drift_prob
    switches[0] = False
    jumps = np.where(switches & (o > 1), 1 + rng.integers(0, max(o - 1, 1), size=n), 0)
    start_idx = rng.integers(0, o)
    walk_idx = (start_idx + np.cumsum(jumps)) % o
    clusters = owned[walk_idx]

    noisy = rng.random(n) < spec.noise_prob
    sizes = spec.sizes
    starts = spec.starts
    within = np.floor(rng.random(n) * sizes[clusters]).astype(np.int64)
    items = starts[clusters] + within
    random_items = rng.integers(0, spec.item_count, size=n)
    items = np.where(noisy, random_items, items)
    emitted_clusters = spec.cluster_of(items)

    dur = np.round(rng.uniform(5.0, 300.0, size=n), 1)
    watch = np.round(dur * rng.uniform(0.05, 1.0, size=n), 1)
    flags = (rng.random((n, 3)) < 0.05).astype(np.int64)
    labels = flags[:, 0] | (flags[:, 1] << 1) | (flags[:, 2] << 2)

    return Trace(
        user=user,
        items=items.astype(np.int64),
        watch=watch,
        dur=dur,
        tags=emitted_clusters.astype(np.int64),
        labels=labels.astype(np.int64),
        clusters=clusters.astype(np.int64),
    )


def generate(spec: WorldSpec) -> list[Trace]:
    """All user traces for the world; deterministic in (spec, seed)."""
    return [generate_trace(spec, u) for u in range(spec.user_count)]


def next_item_split(trace: Trace, max_seq_len: int) -> Example:
    """Hold out the final item; history is the prior items, newest-first truncated."""
    n = len(trace)
    if n < 2:
        raise DataError(f"trace for user {trace.user} too short to split (length {n})")
    stop = n - 1
    start = max(0, stop - max_seq_len)
    return Example(trace=trace, start=start, stop=stop)


def split_dataset(traces: Sequence[Trace], max_seq_len: int) -> tuple[list[Example], int]:
    """Split every long-enough trace; returns (examples, skipped_count)."""
    examples = []
    skipped = 0
    for t in traces:
        if len(t) < 2:
            skipped += 1
            continue
        examples.append(next_item_split(t, max_seq_len))
    return examples, skipped


def batch_stream(examples: Sequence[Example], batch_size: int, seed: int) -> Iterator[TrainingBatch]:
    """Endless shuffled batches; each epoch covers every example exactly once.

    A trailing single example (which could not form in-batch negatives on
    its own) is folded into the preceding batch.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    if len(examples) < 2:
        raise ConfigError(f"need >= 2 examples to stream batches, got {len(examples)}")
    epoch = 0
    while True:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1, epoch])))
        order = rng.permutation(len(examples))
        bounds = list(range(0, len(order), batch_size)) + [len(order)]
        if bounds[-1] - bounds[-2] == 1:
            bounds.pop(-2)
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            yield TrainingBatch([examples[j] for j in order[lo:hi]])
        epoch += 1


# ---------------------------------------------------------------------------
# file format


def save_dataset(path: str, traces: Sequence[Trace], spec: WorldSpec, config_hash: str = "") -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        for t in traces:
            line = {
                "user": t.user,
                "items": t.items.tolist(),
                "watch": t.watch.tolist(),
                "dur": t.dur.tolist(),
                "tags": t.tags.tolist(),
                "labels": t.labels.tolist(),
                "clusters": t.clusters.tolist(),
            }
            f.write(json.dumps(line, separators=(",", ":")) + "\n")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "world": spec.__dict__,
        "trace_count": len(traces),
        "config_hash": config_hash,
    }
    with open(manifest_path(path), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def manifest_path(dataset_path: str) -> str:
    return dataset_path + ".manifest.json"


def load_dataset(path: str) -> tuple[list[Trace], dict]:
    try:
        with open(manifest_path(path)) as f:
            manifest = json.load(f)
        raw_lines = open(path).read().splitlines()
    except OSError as e:
        raise DataError(f"cannot read dataset {path!r}: {e}") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported dataset schema_version {manifest.get('schema_version')}")
    traces = []
    for lineno, line in enumerate(raw_lines, start=1):
        row = json.loads(line)
        unknown = set(row) - TRACE_KEYS
        if unknown:
            raise DataError(f"{path}:{lineno}: unknown attribute(s) {sorted(unknown)}")
        missing = TRACE_KEYS - set(row)
        if missing:
            raise DataError(f"{path}:{lineno}: missing attribute(s) {sorted(missing)}")
        traces.append(
            Trace(
                user=int(row["user"]),
                items=np.asarray(row["items"], dtype=np.int64),
                watch=np.asarray(row["watch"], dtype=np.float64),
                dur=np.asarray(row["dur"], dtype=np.float64),
                tags=np.asarray(row["tags"], dtype=np.int64),
                labels=np.asarray(row["labels"], dtype=np.int64),
                clusters=np.asarray(row["clusters"], dtype=np.int64),
            )
        )
    return traces, manifest
