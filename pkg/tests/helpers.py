"""Shared test oracles, independent of the library paths they verify."""

import numpy as np


def fd_gradient(loss_fn, arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of loss_fn() w.r.t. the in-place array."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn()
        flat[i] = orig - h
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def fill_rule_oracle(seq_len: int, windows, raw_tail: int):
    """Reference assignment of history positions to windows, one item at a time.

    Walks positions newest to oldest handing each to the next open slot:
    first the raw tail, then the configured windows from the newest window
    backwards.  Returns ({window_index: [positions...]}, raw_positions).
    """
    slots = ["raw"] * raw_tail
    sizes = [size for size, count in windows for _ in range(count)]
    for w in range(len(sizes) - 1, -1, -1):
        slots.extend([w] * sizes[w])
    raw_positions = []
    groups: dict[int, list[int]] = {}
    for offset, pos in enumerate(range(seq_len - 1, -1, -1)):
        owner = slots[offset]
        if owner == "raw":
            raw_positions.append(pos)
        else:
            groups.setdefault(owner, []).append(pos)
    for members in groups.values():
        members.sort()
    raw_positions.sort()
    return groups, raw_positions


def sorted_topk_oracle(scores: np.ndarray, ids: np.ndarray, k: int):
    """Plain full sort by (score desc, id asc), truncated to k."""
    ranked = sorted(zip(ids.tolist(), scores.tolist()), key=lambda p: (-p[1], p[0]))
    return ranked[:k]
