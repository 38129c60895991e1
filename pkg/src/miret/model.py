"""Full retrieval model: embed -> compress -> causal backbone -> interests.

A bank of k learned query tokens is appended after the compressed history;
the backbone's outputs at those positions are the user's interest vectors.
Causal masking lets query token j see the whole history and tokens 1..j,
so later interests can specialize against earlier ones.  Candidate scoring
takes the max dot product over the k interests, with the subgradient
flowing only through the winning interest (ties go to the lowest index).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .compression import CompressionLayout, Compressor, GroupEncoder
from .embedding import KNOWN_ATTRIBUTES, BucketSpec, FeatureEncoder, InteractionRecord, records_to_columns
from .errors import ConfigError, ContractError
from .tensor import Tensor
from .transformer import TransformerConfig, TransformerStack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Every model hyperparameter in one place."""

    dim: int = 32
    layers: int = 2
    heads: int = 4
    interests: int = 4
    max_seq_len: int = 64
    vocab_size: int = 10000
    tag_vocab: int = 8
    windows: tuple[tuple[int, int], ...] = ((16, 1),)
    raw_tail: int = 48
    watch_bucket_max: float = 600.0
    watch_bucket_count: int = 600
    duration_bucket_max: float = 300.0
    duration_bucket_count: int = 1000
    smoothing_alpha: float = 0.1
    attributes: tuple[str, ...] = KNOWN_ATTRIBUTES
    normalize: bool = False
    ffn_multiplier: int = 4
    norm_eps: float = 1e-6
    item_init_scale: float | None = None
    query_init_scale: float | None = None
    query_init_orthogonal: bool = False

    def __post_init__(self):
        if self.interests < 1 or self.interests > 16:
            raise ConfigError(f"interests must be in [1, 16], got {self.interests}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.smoothing_alpha < 1.0:
            raise ConfigError(f"smoothing_alpha must be in [0, 1), got {self.smoothing_alpha}")
        if self.layout.total_length != self.max_seq_len:
            raise ConfigError(
                f"compression layout covers {self.layout.total_length} items but max_seq_len is {self.max_seq_len}"
            )

    @property
    def layout(self) -> CompressionLayout:
        return CompressionLayout(tuple(tuple(w) for w in self.windows), self.raw_tail)

    @property
    def watch_bucket(self) -> BucketSpec:
        return BucketSpec("watch_time", self.watch_bucket_max, self.watch_bucket_count)

    @property
    def duration_bucket(self) -> BucketSpec:
        return BucketSpec("duration", self.duration_bucket_max, self.duration_bucket_count)


@dataclass
class InterestSet:
    """The k interest vectors produced by one forward pass, in query order."""

    vectors: Tensor


class QueryTokenBank:
    """k learned query tokens; rows are independent parameters.

    Distinct rows break the symmetry that would otherwise leave every
    interest identical; orthogonal initialization pushes the rows maximally
    apart so winner-take-all score routing can specialize them.
    """

    def __init__(
        self,
        k: int,
        dim: int,
        rng: np.random.Generator,
        dtype=np.float32,
        scale: float | None = None,
        orthogonal: bool = False,
    ):
        bound = scale if scale is not None else 1.0 / np.sqrt(dim)
        if orthogonal:
            gauss = rng.normal(size=(dim, k))
            q, _ = np.linalg.qr(gauss)
            rows = (q[:, :k].T * bound * np.sqrt(dim)).astype(dtype)
            self.tokens = Tensor(rows, requires_grad=True)
        else:
            self.tokens = Tensor(rng.uniform(-bound, bound, size=(k, dim)).astype(dtype), requires_grad=True)
        self.k = k


class MultiInterestModel:
    """Composable forward pass from raw interaction records to interests."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
        self.encoder = FeatureEncoder(
            vocab_size=cfg.vocab_size,
            tag_vocab=cfg.tag_vocab,
            dim=cfg.dim,
            rng=rng,
            attributes=cfg.attributes,
            watch_bucket=cfg.watch_bucket,
            duration_bucket=cfg.duration_bucket,
            dtype=dtype,
            item_init_scale=cfg.item_init_scale,
        )
        self.compressor = Compressor(
            cfg.layout, GroupEncoder(cfg.dim, cfg.heads, rng, dtype, cfg.ffn_multiplier)
        )
        backbone_cfg = TransformerConfig(
            dim=cfg.dim,
            layers=cfg.layers,
            heads=cfg.heads,
            ffn_multiplier=cfg.ffn_multiplier,
            mask_mode="causal",
            position_encoding="rotary",
            norm_eps=cfg.norm_eps,
        )
        self.backbone = TransformerStack(backbone_cfg, rng, dtype)
        self.query_bank = QueryTokenBank(
            cfg.interests, cfg.dim, rng, dtype,
            scale=cfg.query_init_scale, orthogonal=cfg.query_init_orthogonal,
        )

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = self.encoder.parameters()
        params += self.compressor.parameters()
        params += self.backbone.parameters("backbone")
        params.append(("query_tokens", self.query_bank.tokens))
        return params

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    # ------------------------------------------------------------------
    # forward passes

    def interests_from_columns(self, cols: dict[str, np.ndarray], batch: int, seq_len: int) -> Tensor:
        """Batched forward over equal-length histories; returns (batch, k, dim)."""
        if seq_len < 1:
            raise ContractError("forward: history must contain at least one record")
        tokens = T.reshape(self.encoder.encode_columns(cols), (batch, seq_len, self.cfg.dim))
        compressed = self.compressor.compress(tokens).tokens
        m = compressed.shape[1]
        queries = T.repeat_axis0(self.query_bank.tokens, batch)
        x = T.concat([compressed, queries], axis=1)
        out = self.backbone(x)
        return T.slice_axis(out, 1, m, m + self.query_bank.k)

    def forward(self, history: Sequence[InteractionRecord]) -> InterestSet:
        """Interests for one user history (most recent record last)."""
        if len(history) == 0:
            raise ContractError("forward: empty history")
        if len(history) > self.cfg.max_seq_len:
            log.warning(
                "history length %d exceeds max_seq_len %d; truncating oldest items",
                len(history),
                self.cfg.max_seq_len,
            )
            history = history[-self.cfg.max_seq_len :]
        cols = records_to_columns(history)
        interests = self.interests_from_columns(cols, 1, len(history))
        return InterestSet(vectors=T.reshape(interests, (self.query_bank.k, self.cfg.dim)))

    def score(self, candidate_emb: Tensor, interests: InterestSet) -> Tensor:
        """Max over interests of the candidate dot product (scalar tensor)."""
        u = interests.vectors
        if candidate_emb.shape != (self.cfg.dim,) or u.shape[-1] != self.cfg.dim:
            raise ContractError(f"score: dimension mismatch {candidate_emb.shape} vs {u.shape}")
        if self.cfg.normalize:
            u = T.rms_norm(u, Tensor(np.ones(self.cfg.dim, dtype=u.dtype)), 0.0)
            candidate_emb = T.mul(candidate_emb, float(1.0 / np.sqrt((candidate_emb.data**2).mean() + 1e-12)))
        dots = T.reshape(T.matmul(u, T.reshape(candidate_emb, (self.cfg.dim, 1))), (self.query_bank.k,))
        return T.max_over_axis(dots, axis=0)

    def item_embeddings(self) -> np.ndarray:
        """Frozen copy of the item-id embedding matrix (shared input/output)."""
        return self.encoder.item_table.weights.data.copy()

    # ------------------------------------------------------------------
    # checkpoint plumbing

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.parameters())
        missing = set(own) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, p in own.items():
            incoming = arrays[name]
            if incoming.shape != p.data.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {incoming.shape} != model {p.data.shape}")
            p.data[...] = incoming.astype(p.data.dtype)
