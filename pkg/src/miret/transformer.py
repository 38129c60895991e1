"""Pre-norm residual transformer blocks with configurable attention masks.

The causal stack is the sequence backbone; a single bidirectional layer
(no position encoding) doubles as the window encoder for history
compression.  RMS normalization, rotary positions on queries/keys, and a
SiLU-gated feed-forward follow the common decoder convention.

Forward with frozen parameters is pure and thread-safe; training
forward/backward belongs to one graph on one thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class TransformerConfig:
    dim: int
    layers: int
    heads: int
    ffn_multiplier: int = 4
    mask_mode: str = "causal"
    position_encoding: str = "rotary"
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.mask_mode not in ("causal", "bidirectional"):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if self.position_encoding not in ("rotary", "none"):
            raise ConfigError(f"unknown position_encoding {self.position_encoding!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class AttentionMask:
    """Boolean allow-matrix: ``allowed[i, j]`` means i may attend to j."""

    allowed: np.ndarray
    valid: np.ndarray

    @classmethod
    def causal(cls, n: int) -> "AttentionMask":
        return cls(np.tril(np.ones((n, n), dtype=bool)), np.ones(n, dtype=bool))

    @classmethod
    def bidirectional(cls, n: int, valid: np.ndarray | None = None) -> "AttentionMask":
        if valid is None:
            valid = np.ones(n, dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        return cls(np.outer(valid, valid), valid)

    def check(self) -> None:
        starved = self.valid & ~self.allowed.any(axis=1)
        if starved.any():
            raise ContractError(f"attention mask: valid position {int(np.argmax(starved))} may attend to nothing")


def rotary_tables(n: int, head_dim: int, dtype, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-position rotation angles for consecutive feature pairs."""
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(n, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 0.0) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned gain."""
    return T.rms_norm(x, gain, eps)


def _init(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class AttentionBlock:
    """One pre-norm residual block: x + MHA(norm(x)), then + FFN(norm(.))."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        d, f = cfg.dim, cfg.dim * cfg.ffn_multiplier
        self.cfg = cfg
        self.wq = _init(rng, d, (d, d), dtype)
        self.wk = _init(rng, d, (d, d), dtype)
        self.wv = _init(rng, d, (d, d), dtype)
        self.wo = _init(rng, d, (d, d), dtype)
        self.attn_gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.ffn_gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.w_gate = _init(rng, d, (d, f), dtype)
        self.w_up = _init(rng, d, (d, f), dtype)
        self.w_down = _init(rng, f, (f, d), dtype)

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.attn.wq", self.wq),
            (f"{prefix}.attn.wk", self.wk),
            (f"{prefix}.attn.wv", self.wv),
            (f"{prefix}.attn.wo", self.wo),
            (f"{prefix}.attn_norm.gain", self.attn_gain),
            (f"{prefix}.ffn_norm.gain", self.ffn_gain),
            (f"{prefix}.ffn.w_gate", self.w_gate),
            (f"{prefix}.ffn.w_up", self.w_up),
            (f"{prefix}.ffn.w_down", self.w_down),
        ]

    def _project(self, flat: Tensor, w: Tensor, b: int, n: int) -> Tensor:
        cfg = self.cfg
        heads = T.reshape(T.matmul(flat, w), (b, n, cfg.heads, cfg.head_dim))
        return T.transpose(heads, (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: AttentionMask, rope: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
        cfg = self.cfg
        b, n, d = x.shape
        if mask.allowed.shape != (n, n):
            raise ContractError(f"mask shape {mask.allowed.shape} does not match sequence length {n}")
        mask.check()

        h = rms_norm(x, self.attn_gain, cfg.norm_eps)
        flat = T.reshape(h, (b * n, d))
        q = self._project(flat, self.wq, b, n)
        k = self._project(flat, self.wk, b, n)
        v = self._project(flat, self.wv, b, n)
        if rope is not None:
            cos, sin = rope
            q = T.rope_rotate(q, cos, sin)
            k = T.rope_rotate(k, cos, sin)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(cfg.head_dim))
        att = T.masked_softmax(scores, mask.allowed)
        ctx = T.transpose(T.matmul(att, v), (0, 2, 1, 3))
        out = T.matmul(T.reshape(ctx, (b * n, d)), self.wo)
        x = T.add(x, T.reshape(out, (b, n, d)))

        h2 = rms_norm(x, self.ffn_gain, cfg.norm_eps)
        flat2 = T.reshape(h2, (b * n, d))
        gated = T.mul(T.silu(T.matmul(flat2, self.w_gate)), T.matmul(flat2, self.w_up))
        return T.add(x, T.reshape(T.matmul(gated, self.w_down), (b, n, d)))


class TransformerStack:
    """L stacked attention blocks with a final normalization."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.blocks = [AttentionBlock(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.final_gain = Tensor(np.ones(cfg.dim, dtype=dtype), requires_grad=True)

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = []
        for i, blk in enumerate(self.blocks):
            params += blk.parameters(f"{prefix}.layer{i}")
        params.append((f"{prefix}.final_norm.gain", self.final_gain))
        return params

    def __call__(self, x: Tensor, mask: AttentionMask | None = None) -> Tensor:
        b, n, d = x.shape
        if mask is None:
            mask = AttentionMask.causal(n) if self.cfg.mask_mode == "causal" else AttentionMask.bidirectional(n)
        rope = None
        if self.cfg.position_encoding == "rotary":
            rope = rotary_tables(n, self.cfg.head_dim, x.data.dtype)
        for blk in self.blocks:
            x = blk(x, mask, rope)
        return rms_norm(x, self.final_gain, self.cfg.norm_eps)


def causal_transformer(tokens: Tensor, stack: TransformerStack) -> Tensor:
    """Run the causal backbone over ``tokens`` of shape (b, n, d) or (n, d)."""
    single = tokens.data.ndim == 2
    if single:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    out = stack(tokens)
    return T.reshape(out, out.shape[1:]) if single else out


def attention_mac_count(seq_len: int, layers: int, dim: int) -> int:
    """Exact attention multiply-adds executed by a stack of ``layers`` blocks.

    Per layer the kernels compute dense score and context products:
    ``n*n*head_dim`` multiply-adds per head for each, i.e. ``2 * n^2 * dim``.
    Projections and feed-forward cost scale linearly in n and are excluded.
    """
    return 2 * layers * seq_len * seq_len * dim
