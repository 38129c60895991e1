"""Attribute embeddings and per-item token fusion.

Discrete attributes (item id, tag id, interaction flags) use lookup
tables; continuous attributes (watch time, duration) are bucketized
first.  One watched-item event fuses into a single d-dimensional token
via concat -> affine -> SiLU.

Tables are mutated only by the training thread; frozen copies of the
weights are safe to share read-only for inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

LABEL_FLAGS = ("like", "comment", "follow")
KNOWN_ATTRIBUTES = ("watch_time", "duration", "tag_id", "labels")


@dataclass
class InteractionRecord:
    """One watched-item event: the item id plus its watching side-attributes."""

    item_id: int
    watch_time: float
    duration: float
    tag_id: int
    labels: tuple[int, ...] = ()

    def __post_init__(self):
        if not (np.isfinite(self.watch_time) and self.watch_time >= 0):
            raise ContractError(f"watch_time must be finite and >= 0, got {self.watch_time}")
        if not (np.isfinite(self.duration) and self.duration >= 0):
            raise ContractError(f"duration must be finite and >= 0, got {self.duration}")


@dataclass(frozen=True)
class BucketSpec:
    """Uniform bucketing of a nonnegative continuous attribute."""

    attribute: str
    max_value: float
    bucket_count: int

    def bucketize(self, value: float) -> int:
        """Map ``value`` to a bucket in ``[0, bucket_count - 1]``.

        ``int(min(value, max) / max * count)``, clamped so the upper
        boundary lands in the last bucket instead of overflowing the table.
        """
        if not np.isfinite(value) or value < 0:
            raise ContractError(f"{self.attribute}: bucketize requires finite value >= 0, got {value}")
        idx = int(min(value, self.max_value) / self.max_value * self.bucket_count)
        return min(idx, self.bucket_count - 1)

    def bucketize_array(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if np.any(~np.isfinite(values)) or np.any(values < 0):
            raise ContractError(f"{self.attribute}: bucketize requires finite values >= 0")
        idx = (np.minimum(values, self.max_value) / self.max_value * self.bucket_count).astype(np.int64)
        return np.minimum(idx, self.bucket_count - 1)


class EmbeddingTable:
    """A named vocabulary-to-vector lookup table with row-sparse gradients."""

    def __init__(self, name: str, rows: int, dim: int, rng: np.random.Generator, dtype=np.float32,
                 init_scale: float | None = None):
        self.name = name
        self.rows = rows
        self.dim = dim
        bound = init_scale if init_scale is not None else 1.0 / np.sqrt(dim)
        self.weights = Tensor(rng.uniform(-bound, bound, size=(rows, dim)).astype(dtype), requires_grad=True)

    def lookup(self, idx: int) -> Tensor:
        return T.reshape(self.lookup_many(np.asarray([idx])), (self.dim,))

    def lookup_many(self, indices: np.ndarray) -> Tensor:
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self.rows):
            bad = int(indices[(indices < 0) | (indices >= self.rows)][0])
            raise IndexError(f"embedding table {self.name!r}: id {bad} outside [0, {self.rows})")
        return T.gather_rows(self.weights, indices)


class TokenFuser:
    """Learned affine map from concatenated attribute embeddings to one token."""

    def __init__(self, num_inputs: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        fan_in = num_inputs * dim
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, dim)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.num_inputs = num_inputs
        self.dim = dim

    def __call__(self, item_emb: Tensor, attr_embs: Sequence[Tensor]) -> Tensor:
        if len(attr_embs) != self.num_inputs - 1:
            raise ShapeError(f"fuse expects {self.num_inputs - 1} attribute embeddings, got {len(attr_embs)}")
        parts = [item_emb, *attr_embs]
        for p in parts:
            if p.shape[-1] != self.dim:
                raise ShapeError(f"fuse input has width {p.shape[-1]}, expected {self.dim}")
        cat = T.concat(parts, axis=-1)
        if cat.data.ndim == 1:
            cat = T.reshape(cat, (1, -1))
            return T.reshape(T.silu(T.add_bias(T.matmul(cat, self.weight), self.bias)), (self.dim,))
        return T.silu(T.add_bias(T.matmul(cat, self.weight), self.bias))


class FeatureEncoder:
    """Maps interaction columns to fused tokens: the model's input stage.

    Attribute order is fixed by configuration; every enabled attribute owns
    one embedding table, and the interaction flags contribute a single
    multi-hot-summed embedding.
    """

    def __init__(
        self,
        vocab_size: int,
        tag_vocab: int,
        dim: int,
        rng: np.random.Generator,
        attributes: Sequence[str] = KNOWN_ATTRIBUTES,
        watch_bucket: BucketSpec = BucketSpec("watch_time", 600.0, 600),
        duration_bucket: BucketSpec = BucketSpec("duration", 300.0, 1000),
        label_flags: Sequence[str] = LABEL_FLAGS,
        dtype=np.float32,
        item_init_scale: float | None = None,
    ):
        unknown = [a for a in attributes if a not in KNOWN_ATTRIBUTES]
        if unknown:
            raise ConfigError(f"unknown attribute(s) in schema: {unknown}")
        self.attributes = tuple(attributes)
        self.dim = dim
        self.dtype = dtype
        self.watch_bucket = watch_bucket
        self.duration_bucket = duration_bucket
        self.num_flags = len(label_flags)
        self.item_table = EmbeddingTable("item", vocab_size, dim, rng, dtype, init_scale=item_init_scale)
        self.tables: dict[str, EmbeddingTable] = {}
        if "watch_time" in self.attributes:
            self.tables["watch_time"] = EmbeddingTable("watch_time", watch_bucket.bucket_count, dim, rng, dtype)
        if "duration" in self.attributes:
            self.tables["duration"] = EmbeddingTable("duration", duration_bucket.bucket_count, dim, rng, dtype)
        if "tag_id" in self.attributes:
            self.tables["tag_id"] = EmbeddingTable("tag", tag_vocab, dim, rng, dtype)
        if "labels" in self.attributes:
            self.tables["labels"] = EmbeddingTable("labels", self.num_flags, dim, rng, dtype)
        self.fuser = TokenFuser(1 + len(self.attributes), dim, rng, dtype)

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = [("embed.item", self.item_table.weights)]
        params += [(f"embed.{name}", tab.weights) for name, tab in self.tables.items()]
        params += [("fuse.weight", self.fuser.weight), ("fuse.bias", self.fuser.bias)]
        return params

    def encode_columns(self, cols: dict[str, np.ndarray]) -> Tensor:
        """Fuse column arrays for n events into tokens of shape ``(n, dim)``."""
        item_emb = self.item_table.lookup_many(cols["items"])
        attr_embs = []
        for name in self.attributes:
            if name == "watch_time":
                idx = self.watch_bucket.bucketize_array(cols["watch"])
                attr_embs.append(self.tables["watch_time"].lookup_many(idx))
            elif name == "duration":
                idx = self.duration_bucket.bucketize_array(cols["dur"])
                attr_embs.append(self.tables["duration"].lookup_many(idx))
            elif name == "tag_id":
                attr_embs.append(self.tables["tag_id"].lookup_many(cols["tags"]))
            elif name == "labels":
                bits = np.asarray(cols["labels"], dtype=np.int64)
                multihot = ((bits[:, None] >> np.arange(self.num_flags)) & 1).astype(self.dtype)
                attr_embs.append(T.matmul(Tensor(multihot), self.tables["labels"].weights))
        return self.fuser(item_emb, attr_embs)

    def encode_records(self, records: Sequence[InteractionRecord]) -> Tensor:
        return self.encode_columns(records_to_columns(records))


def records_to_columns(records: Sequence[InteractionRecord]) -> dict[str, np.ndarray]:
    masks = [sum(1 << f for f in r.labels) for r in records]
    return {
        "items": np.asarray([r.item_id for r in records], dtype=np.int64),
        "watch": np.asarray([r.watch_time for r in records], dtype=np.float64),
        "dur": np.asarray([r.duration for r in records], dtype=np.float64),
        "tags": np.asarray([r.tag_id for r in records], dtype=np.int64),
        "labels": np.asarray(masks, dtype=np.int64),
    }
