"""Exact top-K retrieval over the item matrix and hit-rate evaluation.

Scoring is a full scan (exact, not approximate): per interest vector we
take the highest-dot-product items, merge the per-interest lists with
max-score deduplication, re-rank, and truncate.  Ties break toward the
lower item id everywhere, which makes rankings fully deterministic.

The index is immutable once built and safe to share across threads.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Example
from .errors import ContractError, DataError
from .model import InterestSet, MultiInterestModel

log = logging.getLogger(__name__)

DEFAULT_CUTOFFS = (50, 100, 500, 1000)


@dataclass(frozen=True)
class RetrievalIndex:
    """Frozen item embeddings with a parallel id list."""

    items: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        if len(self.ids) != len(set(self.ids.tolist())):
            raise DataError("retrieval index ids must be unique")
        if not np.all(np.isfinite(self.items)):
            raise DataError("retrieval index contains non-finite embeddings")

    @classmethod
    def from_model(cls, model: MultiInterestModel) -> "RetrievalIndex":
        items = model.item_embeddings()
        return cls(items=items, ids=np.arange(items.shape[0], dtype=np.int64))

    @property
    def size(self) -> int:
        return self.items.shape[0]


@dataclass
class EvalRequest:
    """One replayed request: a history plus the true next item id."""

    columns: dict[str, np.ndarray]
    held_out: int

    @classmethod
    def from_example(cls, ex: Example) -> "EvalRequest":
        return cls(columns=ex.columns(), held_out=ex.held_out)

    @property
    def length(self) -> int:
        return len(self.columns["items"])


def _select_topk(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best (score desc, id asc), identical to a full sort."""
    n = scores.shape[0]
    if k >= n:
        cand = np.arange(n)
    else:
        part = np.argpartition(-scores, k - 1)[:k]
        thresh = scores[part].min()
        cand = np.flatnonzero(scores >= thresh)  # keep every boundary tie, then order properly
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order][:k]


def topk_per_interest(interests: InterestSet, index: RetrievalIndex, k_each: int) -> list[list[tuple[int, float]]]:
    """For each interest vector, the exact ``k_each`` highest-scoring items."""
    if k_each < 1:
        raise ContractError(f"k_each must be >= 1, got {k_each}")
    if k_each > index.size:
        log.warning("k_each %d exceeds index size %d; clamping", k_each, index.size)
        k_each = index.size
    vectors = interests.vectors.data if hasattr(interests.vectors, "data") else np.asarray(interests.vectors)
    all_scores = index.items @ vectors.T  # (|X|, k)
    out = []
    for j in range(vectors.shape[0]):
        scores = all_scores[:, j]
        sel = _select_topk(scores, index.ids, k_each)
        out.append([(int(index.ids[i]), float(scores[i])) for i in sel])
    return out


def merge_truncate(per_interest: Sequence[Sequence[tuple[int, float]]], k: int) -> list[tuple[int, float]]:
    """Union the lists (an id keeps its max score), re-rank, truncate to k."""
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    best: dict[int, float] = {}
    for lst in per_interest:
        for item_id, score in lst:
            cur = best.get(item_id)
            if cur is None or score > cur:
                best[item_id] = score
    ranked = sorted(best.items(), key=lambda pair: (-pair[1], pair[0]))
    return ranked[:k]


def default_k_each(k_final: int, interests: int) -> int:
    """Oversample each interest before the merge to reduce truncation loss."""
    return math.ceil(1.5 * k_final / interests)


def retrieve(
    model: MultiInterestModel,
    interests: InterestSet,
    index: RetrievalIndex,
    k_final: int,
    k_each: int | None = None,
    exclude_ids: Sequence[int] | None = None,
) -> list[tuple[int, float]]:
    """Full pipeline for one request: per-interest scan, merge, truncate."""
    if k_each is None:
        k_each = default_k_each(k_final, model.cfg.interests)
    lists = topk_per_interest(interests, index, k_each)
    merged = merge_truncate(lists, k_final + (len(exclude_ids) if exclude_ids else 0))
    if exclude_ids:
        banned = set(int(x) for x in exclude_ids)
        merged = [(i, s) for i, s in merged if i not in banned]
    return merged[:k_final]


def evaluate(
    model: MultiInterestModel,
    index: RetrievalIndex,
    requests: Sequence[EvalRequest],
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
    filter_history: bool = False,
    chunk: int = 256,
) -> dict:
    """Hit rate at each cutoff by request replay.

    One retrieval pass runs at the largest cutoff; HR@K reads membership in
    the list's K-prefix, which makes HR@K nondecreasing in K by
    construction.
    """
    if not requests:
        raise ContractError("evaluate: no requests")
    cutoffs = sorted(int(k) for k in cutoffs)
    k_max = cutoffs[-1]
    k_each = default_k_each(k_max, model.cfg.interests)
    hits = {k: 0 for k in cutoffs}

    by_len: dict[int, list[int]] = {}
    for i, req in enumerate(requests):
        by_len.setdefault(req.length, []).append(i)

    with T.no_grad():
        for length, members in sorted(by_len.items()):
            for lo in range(0, len(members), chunk):
                batch = members[lo : lo + chunk]
                cols = {
                    key: np.concatenate([requests[i].columns[key] for i in batch])
                    for key in ("items", "watch", "dur", "tags", "labels")
                }
                interests = model.interests_from_columns(cols, len(batch), length).data
                for row, i in enumerate(batch):
                    req = requests[i]
                    exclude = req.columns["items"] if filter_history else None
                    merged = retrieve(
                        model, InterestSet(vectors=_Frozen(interests[row])), index, k_max, k_each, exclude
                    )
                    ranked_ids = [item_id for item_id, _ in merged]
                    try:
                        pos = ranked_ids.index(req.held_out)
                    except ValueError:
                        continue
                    for k in cutoffs:
                        if pos < k:
                            hits[k] += 1

    n = len(requests)
    return {
        "request_count": n,
        "cutoffs": cutoffs,
        "k_each": k_each,
        "hit_rate": {str(k): hits[k] / n for k in cutoffs},
    }


def hit_rate(
    model: MultiInterestModel, index: RetrievalIndex, requests: Sequence[EvalRequest], k: int
) -> float:
    """Fraction of requests whose held-out item appears in the top-k output."""
    report = evaluate(model, index, requests, cutoffs=(k,))
    return report["hit_rate"][str(k)]


class _Frozen:
    """Minimal tensor-shaped wrapper so frozen numpy rows fit InterestSet."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        self.data = data

    @property
    def shape(self):
        return self.data.shape
