"""Adaptive history compression: encode old item windows into single tokens.

The configured layout partitions a full-length history into fixed windows
(oldest first) plus an uncompressed raw tail of the most recent items.
Each window passes through a shared single-layer bidirectional encoder and
is mean-pooled to one token; the compressed stream preserves chronology.

Shorter histories fill newest-first: the raw tail keeps the latest items
always, remaining items occupy windows from the newest window backwards,
and the oldest partially-filled window is pooled as a smaller group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor
from .transformer import AttentionMask, TransformerConfig, TransformerStack, attention_mac_count


@dataclass(frozen=True)
class CompressionLayout:
    """Ordered (window_size, count) pairs plus the uncompressed tail length."""

    windows: tuple[tuple[int, int], ...]
    raw_tail: int

    def __post_init__(self):
        for size, count in self.windows:
            if size < 1 or count < 1:
                raise ConfigError(f"window (size={size}, count={count}) must be positive")
        if self.raw_tail < 0:
            raise ConfigError("raw_tail must be >= 0")

    @property
    def total_length(self) -> int:
        return sum(size * count for size, count in self.windows) + self.raw_tail

    @property
    def compressed_length(self) -> int:
        return sum(count for _, count in self.windows) + self.raw_tail

    def expanded(self) -> list[tuple[int, str]]:
        """Window sizes oldest-to-newest, tagged early (first size class) or mid."""
        first = self.windows[0][0] if self.windows else 0
        out = []
        for size, count in self.windows:
            kind = "early" if size == first else "mid"
            out.extend([(size, kind)] * count)
        return out


@dataclass
class PlannedGroup:
    start: int
    stop: int
    kind: str


@dataclass
class Plan:
    groups: list[PlannedGroup]
    raw_start: int
    seq_len: int

    @property
    def compressed_length(self) -> int:
        return len(self.groups) + (self.seq_len - self.raw_start)


@dataclass
class CompressedSequence:
    """Compressed token stream plus a per-token provenance tag."""

    tokens: Tensor
    provenance: tuple[tuple[str, int], ...]


def plan_layout(seq_len: int, layout: CompressionLayout) -> Plan:
    """Assign positions of a ``seq_len`` history to windows and raw tail.

    The newest ``raw_tail`` items stay uncompressed; older items fill the
    configured windows newest-window-first, and only the oldest reached
    window may end up partial (pooled over its actual members).
    """
    if seq_len < 1:
        raise ContractError(f"plan_layout: sequence length must be >= 1, got {seq_len}")
    if seq_len > layout.total_length:
        raise ContractError(f"plan_layout: length {seq_len} exceeds layout capacity {layout.total_length}")
    tail = min(seq_len, layout.raw_tail)
    end = seq_len - tail
    groups: list[PlannedGroup] = []
    for size, kind in reversed(layout.expanded()):
        if end <= 0:
            break
        start = max(0, end - size)
        groups.append(PlannedGroup(start, end, kind))
        end = start
    groups.reverse()
    return Plan(groups=groups, raw_start=seq_len - tail, seq_len=seq_len)


class GroupEncoder:
    """Single-layer bidirectional encoder + mean pool, shared by all windows."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32, ffn_multiplier: int = 4):
        cfg = TransformerConfig(
            dim=dim,
            layers=1,
            heads=heads,
            ffn_multiplier=ffn_multiplier,
            mask_mode="bidirectional",
            position_encoding="none",
        )
        self.stack = TransformerStack(cfg, rng, dtype)

    def parameters(self, prefix: str = "group") -> list[tuple[str, Tensor]]:
        return self.stack.parameters(prefix)

    def __call__(self, groups: Tensor) -> Tensor:
        """Encode stacked groups of shape (g_count, g, d) down to (g_count, d)."""
        if groups.data.ndim == 2:
            groups = T.reshape(groups, (1,) + groups.shape)
            return T.reshape(self.encode(groups), (groups.shape[-1],))
        return self.encode(groups)

    def encode(self, groups: Tensor) -> Tensor:
        g = groups.shape[1]
        if g < 1:
            raise ContractError("encode_group: empty group")
        enc = self.stack(groups, AttentionMask.bidirectional(g))
        return T.mean_over_axis(enc, axis=1)


class Compressor:
    """Applies a layout plan to token sequences using a shared group encoder."""

    def __init__(self, layout: CompressionLayout, encoder: GroupEncoder):
        self.layout = layout
        self.encoder = encoder

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.encoder.parameters("group")

    def compress(self, tokens: Tensor) -> CompressedSequence:
        """Compress (b, n, d) or (n, d) tokens into the shortened stream."""
        single = tokens.data.ndim == 2
        if single:
            tokens = T.reshape(tokens, (1,) + tokens.shape)
        b, n, _ = tokens.shape
        plan = plan_layout(n, self.layout)

        group_tokens: list[Tensor | None] = [None] * len(plan.groups)
        # batch the encoder across all groups of equal width
        by_size: dict[int, list[int]] = {}
        for gi, grp in enumerate(plan.groups):
            by_size.setdefault(grp.stop - grp.start, []).append(gi)
        for size, members in sorted(by_size.items()):
            stacked = T.concat([T.slice_axis(tokens, 1, plan.groups[gi].start, plan.groups[gi].stop) for gi in members], axis=0)
            encoded = self.encoder.encode(stacked)
            for pos, gi in enumerate(members):
                group_tokens[gi] = T.reshape(T.slice_axis(encoded, 0, pos * b, (pos + 1) * b), (b, 1, -1))

        parts: list[Tensor] = [t for t in group_tokens if t is not None]
        provenance: list[tuple[str, int]] = []
        counters = {"early": 0, "mid": 0}
        for grp in plan.groups:
            provenance.append((grp.kind, counters[grp.kind]))
            counters[grp.kind] += 1
        if plan.raw_start < n:
            parts.append(T.slice_axis(tokens, 1, plan.raw_start, n))
            provenance.extend(("raw", p) for p in range(plan.raw_start, n))
        out = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        if single:
            out = T.reshape(out, out.shape[1:])
        return CompressedSequence(tokens=out, provenance=tuple(provenance))


def compressed_attention_macs(
    seq_len: int, layout: CompressionLayout, backbone_layers: int, dim: int, query_tokens: int = 0
) -> int:
    """Attention multiply-adds of the compressed path, group encoders included."""
    plan = plan_layout(seq_len, layout)
    macs = attention_mac_count(plan.compressed_length + query_tokens, backbone_layers, dim)
    for grp in plan.groups:
        macs += attention_mac_count(grp.stop - grp.start, 1, dim)
    return macs


def uncompressed_attention_macs(seq_len: int, backbone_layers: int, dim: int, query_tokens: int = 0) -> int:
    """Attention multiply-adds of feeding the raw sequence to the backbone."""
    return attention_mac_count(seq_len + query_tokens, backbone_layers, dim)
