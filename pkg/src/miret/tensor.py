"""Dense tensors with reverse-mode gradient accumulation.

Every differentiable computation in the package is expressed through the
operations in this module.  Kernels are numpy-backed and deterministic:
identical inputs produce bit-identical outputs across runs on the same
machine.  Elementwise operations require matching shapes (scalars are the
only broadcast allowed); anything else must be reshaped explicitly.

Gradients accumulate into ``Tensor.grad``: calling ``backward`` twice
without ``zero_grad`` yields exactly twice the single-call gradient.
Tensors are immutable after creation except for grad accumulation; frozen
tensors may be shared across threads for read-only scoring, while a
recorded graph belongs to a single training thread.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_seq_counter = itertools.count()
_grad_enabled = True
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Enable per-op finiteness checks (used by the test suite)."""
    global _debug_checks
    _debug_checks = enabled


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class TapeNode:
    """One executed op: its inputs, its output and the gradient closure."""

    __slots__ = ("seq", "inputs", "out", "grad_fn")

    def __init__(self, inputs, out, grad_fn):
        self.seq = next(_seq_counter)
        self.inputs = inputs
        self.out = out
        self.grad_fn = grad_fn


class ComputationTape:
    """Executed-op record for one backward pass, in execution order.

    ``backward`` visits ``nodes`` strictly in reverse execution order
    (descending creation sequence), so gradient propagation mirrors the
    forward pass exactly.
    """

    __slots__ = ("nodes",)

    def __init__(self, root: "Tensor"):
        seen: set[int] = set()
        nodes: list[TapeNode] = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.seq in seen:
                continue
            seen.add(node.seq)
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        self.nodes = nodes


class Tensor:
    """A dense n-d value array paired with an accumulated gradient array."""

    __slots__ = ("data", "_grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        # allocated lazily; a never-touched gradient reads as zeros
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def _accum_grad(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = g.copy()
        else:
            self._grad += g

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf) into the grad of every reachable leaf.

        Per-pass gradients propagate through private buffers, so repeated
        calls without ``zero_grad`` add up rather than compound.  Buffers
        adopt a closure's output array directly and copy only when a second
        path accumulates into it.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {self.data.shape}")
        flowing: dict[int, np.ndarray] = {id(self): seed}
        owned: set[int] = {id(self)}
        leaves: dict[int, Tensor] = {}
        if self.requires_grad and self.node is None:
            leaves[id(self)] = self
        if self.requires_grad and self.node is not None:
            self._accum_grad(seed)
        tape = ComputationTape(self)
        for node in reversed(tape.nodes):
            out_grad = flowing.pop(id(node.out), None)
            if out_grad is None:
                continue
            grads = node.grad_fn(out_grad)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                buf = flowing.get(key)
                if buf is None:
                    flowing[key] = g
                elif key in owned:
                    buf += g
                else:
                    flowing[key] = buf + g
                    owned.add(key)
                if inp.node is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf._accum_grad(flowing[key])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise ContractError("op produced non-finite values on finite inputs")
    rg = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out.node = TapeNode(inputs, out, grad_fn)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")


def _cast(arr: np.ndarray, dtype) -> np.ndarray:
    return arr if arr.dtype == dtype else arr.astype(dtype)


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _result(a.data - c, (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _result(ad * bd, (a, b), lambda g: (g * bd if need_a else None, g * ad if need_b else None))


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _result(a.data / c, (a,), lambda g: (g / c,))
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def silu(a: Tensor) -> Tensor:
    x = a.data
    # numerically safe logistic: never exponentiates a large positive value
    e = np.exp(-np.abs(x))
    s = _cast(np.where(x >= 0, 1.0, e) / (1.0 + e), x.dtype)
    out = x * s
    return _result(out, (a,), lambda g: (_cast(g * (s * (1.0 + x * (1.0 - s))), x.dtype),))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return _result(r, (a,), lambda g: (g * (0.5 / r),))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    needs = [p.requires_grad for p in parts]

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis) if needs[i] else None
            for i in range(len(parts))
        )

    return _result(data, tuple(parts), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _result(a.data[idx].copy(), (a,), grad_fn)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows ``table[indices]``; backward scatter-adds into those rows."""
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-d, got shape {idx.shape}")
    rows = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        bad = idx[(idx < 0) | (idx >= rows)][0]
        raise IndexError(f"gather_rows: index {bad} out of range for {rows} rows")

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), grad_fn)


def repeat_axis0(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis; backward sums them."""
    data = np.broadcast_to(a.data, (n,) + a.data.shape).copy()
    return _result(data, (a,), lambda g: (g.sum(axis=0),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of ``x`` along the last axis."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.data.shape} and {b.data.shape} are incompatible")
    lead = tuple(range(x.data.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


# ---------------------------------------------------------------------------
# reductions


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]

    def grad_fn(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _result(a.data.mean(axis=axis), (a,), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def max_over_axis(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the subgradient routes to the first (lowest-index) argmax."""
    am = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(am, axis), axis=axis).squeeze(axis)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(am, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-d operands or identically batched stacks of matrices."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim != bd.ndim:
        raise ShapeError(f"matmul: ranks {ad.shape} and {bd.shape} are incompatible")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not align")
    if ad.dtype != bd.dtype:
        raise ShapeError(f"matmul: dtypes {ad.dtype} and {bd.dtype} differ")
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (
            g @ bd.swapaxes(-1, -2) if need_a else None,
            ad.swapaxes(-1, -2) @ g if need_b else None,
        )

    return _result(ad @ bd, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# normalization / attention kernels


def rms_norm(x: Tensor, gain: Tensor, eps: float = 0.0) -> Tensor:
    """Scale rows to unit root-mean-square, then apply a per-dimension gain."""
    if gain.data.ndim != 1 or gain.data.shape[0] != x.data.shape[-1]:
        raise ShapeError(f"rms_norm: gain shape {gain.data.shape} does not match {x.data.shape}")
    xd = x.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    inv = _cast(inv, xd.dtype)
    out = xd * inv * gain.data
    need_x, need_gain = x.requires_grad, gain.requires_grad

    def grad_fn(g):
        dx = dgain = None
        if need_x:
            gh = g * gain.data
            dx = _cast(gh * inv - xd * (inv**3 / d) * (gh * xd).sum(axis=-1, keepdims=True), xd.dtype)
        if need_gain:
            lead = tuple(range(xd.ndim - 1))
            dgain = _cast((g * xd * inv).sum(axis=lead), xd.dtype)
        return (dx, dgain)

    return _result(out, (x, gain), grad_fn)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive feature pairs of ``x[..., pos, :]`` by per-position angles.

    ``cos``/``sin`` have shape ``(positions, features/2)`` and are constants;
    rotation preserves vector norms, and the backward pass is the inverse
    rotation.
    """
    xd = x.data
    half = xd.shape[-1] // 2
    if cos.shape != (xd.shape[-2], half):
        raise ShapeError(f"rope_rotate: angle table {cos.shape} does not match input {xd.shape}")
    x0 = xd[..., 0::2]
    x1 = xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def grad_fn(g):
        g0 = g[..., 0::2]
        g1 = g[..., 1::2]
        dx = np.empty_like(xd)
        dx[..., 0::2] = g0 * cos + g1 * sin
        dx[..., 1::2] = -g0 * sin + g1 * cos
        return (dx,)

    return _result(out, (x,), grad_fn)


def _masked_rowmax(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    masked = np.where(allowed, scores, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0), masked


def masked_softmax(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``allowed`` entries.

    Disallowed entries get probability exactly 0.0, so downstream dot
    products are bit-independent of their input values.  Rows with no
    allowed entry come back all-zero (callers enforce their own contracts).
    """
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), x.data.shape)
    m, masked = _masked_rowmax(x.data, allowed)
    e = np.exp(masked - m)
    z = e.sum(axis=-1, keepdims=True)
    p = _cast(e / np.where(z > 0, z, 1.0), x.data.dtype)

    def grad_fn(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (_cast(p * (g - inner), x.data.dtype),)

    return _result(p, (x,), grad_fn)


def _validate_weights(weights: np.ndarray, allowed: np.ndarray, dtype) -> np.ndarray:
    # validate at double precision, then cast for kernel arithmetic
    w64 = np.asarray(weights, dtype=np.float64)
    if np.any(w64 < 0):
        raise ContractError("softmax_cross_entropy: target weights must be nonnegative")
    if np.any(w64[~allowed] != 0):
        raise ContractError("softmax_cross_entropy: weights assigned to masked entries")
    sums = w64.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ContractError(f"softmax_cross_entropy: weights sum to {sums} (expected 1 within 1e-9)")
    return w64.astype(dtype)


def softmax_cross_entropy_rows(logits: Tensor, weights, allowed=None) -> Tensor:
    """Per-row weighted cross-entropy of the (masked) softmax of ``logits``.

    Returns one loss per row; the gradient w.r.t. a row of logits is
    ``softmax(row) - weights`` on allowed entries and zero elsewhere.
    ``weights`` are targets, not parameters, and receive no gradient.
    """
    ld = logits.data
    if allowed is None:
        allowed = np.ones(ld.shape, dtype=bool)
    else:
        allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), ld.shape)
    if not np.all(allowed.any(axis=-1)):
        raise ContractError("softmax_cross_entropy: a row has no allowed entries")
    w = _validate_weights(weights if not isinstance(weights, Tensor) else weights.data, allowed, ld.dtype)
    m, masked = _masked_rowmax(ld, allowed)
    e = np.exp(masked - m)
    z = e.sum(axis=-1, keepdims=True)
    logz = np.log(z) + m
    # weights sum to one, so the loss collapses to logZ - sum(w * x)
    loss = _cast(logz.squeeze(-1) - (w * np.where(allowed, ld, 0.0)).sum(axis=-1), ld.dtype)
    p = _cast(e / z, ld.dtype)

    def grad_fn(g):
        return ((p - w) * np.expand_dims(g, -1),)

    return _result(loss, (logits,), grad_fn)


def softmax_cross_entropy(logits: Tensor, target_weights) -> Tensor:
    """Vector form: ``-sum(w_i * log softmax(logits)_i)`` as a scalar tensor."""
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: expected a vector, got shape {logits.data.shape}")
    rows = softmax_cross_entropy_rows(reshape(logits, (1, -1)), np.asarray(
        target_weights.data if isinstance(target_weights, Tensor) else target_weights
    ).reshape(1, -1))
    return reshape(rows, ())


# ---------------------------------------------------------------------------
# verification harness


def check_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` to a scalar tensor, and is re-evaluated 2 per
    coordinate at ``x ± h``; the comparison denominator is
    ``max(|analytic|, |numeric|, 1e-8)`` per coordinate.
    """
    probe = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(probe)
    if out.data.shape != ():
        raise ContractError(f"check_gradient: f must be scalar-valued, got shape {out.data.shape}")
    out.backward()
    analytic = probe.grad.copy()

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(probe).item()
            flat[i] = orig - h
            lo = f(probe).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
