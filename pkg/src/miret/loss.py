"""Training objective: smoothed, sampling-corrected in-batch softmax.

Scores between every example's interests and every positive item in the
batch form a B x B logit matrix; row i treats column i as the positive and
the other columns as negatives.  Column logits are corrected by
``-log Q(item)`` where Q comes from a streaming decayed-frequency
estimator, unbiasing the popularity skew of in-batch negative sampling.
Targets are label-smoothed: (1 - alpha) on the positive, alpha spread
uniformly over the surviving negatives.

A duplicate of the row's positive elsewhere in the batch is masked out of
that row's negative set, so true positives are never penalized.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor


def duplicate_mask(item_ids: np.ndarray) -> np.ndarray:
    """allowed[i, j]: column j participates in row i's softmax."""
    ids = np.asarray(item_ids)
    allowed = ids[None, :] != ids[:, None]
    np.fill_diagonal(allowed, True)
    return allowed


def in_batch_logits(interests: Tensor, item_embs: Tensor) -> Tensor:
    """Score matrix (B, B): max-over-interests dot products, row user x column item."""
    b, k, d = interests.shape
    if item_embs.shape != (b, d):
        raise ContractError(f"in_batch_logits: item embeddings {item_embs.shape} do not match interests {interests.shape}")
    flat = T.reshape(interests, (b * k, d))
    per_interest = T.reshape(T.matmul(flat, T.transpose(item_embs, (1, 0))), (b, k, b))
    return T.max_over_axis(per_interest, axis=1)


def logq_correct(logits: Tensor, q: np.ndarray) -> Tensor:
    """Subtract log of each column item's sampling probability from its logits."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0) or np.any(q > 1):
        raise ContractError(f"logq_correct: probabilities must lie in (0, 1], got range [{q.min()}, {q.max()}]")
    if q.shape != (logits.shape[-1],):
        raise ContractError(f"logq_correct: expected {logits.shape[-1]} probabilities, got {q.shape}")
    shift = np.broadcast_to(-np.log(q).astype(logits.dtype), logits.shape).copy()
    return T.add(logits, Tensor(shift))


def smoothing_weights(allowed: np.ndarray, alpha: float, dtype=np.float64) -> np.ndarray:
    """Per-row target weights: 1-alpha on the diagonal, alpha over allowed negatives.

    A row whose negatives were all masked away keeps full weight on its
    positive.
    """
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"smoothing alpha must be in [0, 1), got {alpha}")
    allowed = np.atleast_2d(np.asarray(allowed, dtype=bool))
    rows, n = allowed.shape
    if rows > n:
        raise ContractError(f"smoothing_weights: {rows} rows cannot index positives in {n} columns")
    diag = np.arange(rows)
    pos_mask = np.zeros((rows, n), dtype=bool)
    pos_mask[diag, diag] = True
    neg_counts = (allowed & ~pos_mask).sum(axis=-1)
    share = np.where(neg_counts > 0, alpha / np.maximum(neg_counts, 1), 0.0)
    w = (allowed & ~pos_mask) * share[:, None]
    w[diag, diag] = np.where(neg_counts > 0, 1.0 - alpha, 1.0)
    return w.astype(dtype)


def smoothed_loss(corrected_logits: Tensor, alpha: float, allowed: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Mean smoothed cross-entropy over rows; also returns the per-row losses."""
    n = corrected_logits.shape[-1]
    if allowed is None:
        allowed = np.ones((corrected_logits.shape[0], n), dtype=bool)
    w = smoothing_weights(allowed, alpha)
    rows = T.softmax_cross_entropy_rows(corrected_logits, w, allowed)
    return T.mean_over_axis(rows, axis=0), rows


def smoothed_row_loss(row: Tensor, positive_index: int, alpha: float, allowed: np.ndarray | None = None) -> Tensor:
    """Single-row form of the smoothed loss (positive at ``positive_index``)."""
    n = row.shape[0]
    if allowed is None:
        allowed = np.ones(n, dtype=bool)
    order = np.arange(n)
    perm = np.concatenate(([positive_index], order[order != positive_index]))
    # reuse the diagonal-positive kernel by rotating the positive to the front
    rotated = T.reshape(T.concat([T.slice_axis(row, 0, positive_index, positive_index + 1),
                                  T.slice_axis(row, 0, 0, positive_index),
                                  T.slice_axis(row, 0, positive_index + 1, n)], axis=0), (1, n))
    loss, _ = smoothed_loss(rotated, alpha, np.asarray(allowed, dtype=bool)[perm].reshape(1, n))
    return T.reshape(loss, ())


def in_batch_accuracy(corrected_logits: np.ndarray, allowed: np.ndarray) -> float:
    """Fraction of rows whose positive holds the max corrected logit."""
    masked = np.where(allowed, corrected_logits, -np.inf)
    return float(np.mean(np.argmax(masked, axis=-1) == np.arange(masked.shape[0])))


class FrequencyEstimator:
    """Streaming item-probability estimate from exponentially decayed counts.

    Counts decay lazily by ``decay`` per step; the total mass decays in
    lockstep, so raw estimates over observed items sum to one before the
    floor is applied.  Never-seen items estimate at the floor.
    """

    def __init__(self, decay: float = 0.9999, floor: float = 1e-6):
        if not 0.0 < decay <= 1.0:
            raise ConfigError(f"estimator decay must be in (0, 1], got {decay}")
        self.decay = decay
        self.floor = floor
        self.counts: dict[int, float] = {}
        self.last_step: dict[int, int] = {}
        self.total = 0.0
        self.step = 0

    def observe(self, item_ids) -> None:
        """Fold one batch of positive item ids into the stream (one decay step)."""
        ids = [int(x) for x in item_ids]
        self.step += 1
        self.total = self.total * self.decay + len(ids)
        for x in ids:
            prev = self.counts.get(x, 0.0) * self.decay ** (self.step - self.last_step.get(x, self.step))
            self.counts[x] = prev + 1.0
            self.last_step[x] = self.step

    def estimate(self, item_id: int) -> float:
        item_id = int(item_id)
        if item_id not in self.counts or self.total <= 0:
            return self.floor
        mass = self.counts[item_id] * self.decay ** (self.step - self.last_step[item_id])
        return max(mass / self.total, self.floor)

    def estimates(self, item_ids) -> np.ndarray:
        return np.asarray([self.estimate(x) for x in item_ids], dtype=np.float64)

    def state(self) -> dict:
        return {
            "decay": self.decay,
            "floor": self.floor,
            "total": self.total,
            "step": self.step,
            "counts": {str(k): v for k, v in self.counts.items()},
            "last_step": {str(k): v for k, v in self.last_step.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "FrequencyEstimator":
        est = cls(decay=state["decay"], floor=state["floor"])
        est.total = state["total"]
        est.step = state["step"]
        est.counts = {int(k): float(v) for k, v in state["counts"].items()}
        est.last_step = {int(k): int(v) for k, v in state["last_step"].items()}
        return est
