import numpy as np
import pytest

from helpers import fd_gradient, max_rel_err
from miret import tensor as T
from miret.errors import ContractError, ShapeError
from miret.tensor import Tensor, check_gradient


def t64(data, rg=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    out = T.matmul(t64([[1, 0], [0, 1]]), t64([[2], [3]]))
    assert np.array_equal(out.data, [[2], [3]])


def test_matmul_hand():
    out = T.matmul(t64([[1, 2]]), t64([[3], [4]]))
    assert np.array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2\).*\(3, 1\)"):
        T.matmul(t64([[1, 2]]), t64([[1], [2], [3]]))


def test_matmul_gradient_of_sum():
    a = t64([[1, 2]])
    b = t64([[3], [4]])
    T.sum_all(T.matmul(a, b)).backward()
    assert np.array_equal(a.grad, [[3.0, 4.0]])
    assert np.array_equal(b.grad, [[1.0], [2.0]])
    # independent oracle: central differences at h=1e-3
    probe = np.array([[1.0, 2.0]])
    numeric = fd_gradient(lambda: (probe @ np.array([[3.0], [4.0]])).item(), probe)
    assert max_rel_err(a.grad, numeric) <= 1e-4


# ---------------------------------------------------------------------------
# softmax cross entropy


def test_softmax_xent_hand_values():
    loss = T.softmax_cross_entropy(t64([0.0, 0.0]), [1.0, 0.0])
    assert abs(loss.item() - np.log(2.0)) < 1e-12
    loss = T.softmax_cross_entropy(t64([1.0, 0.0]), [1.0, 0.0])
    assert abs(loss.item() - np.log(1.0 + np.exp(-1.0))) < 1e-12  # = 0.31326...


def test_softmax_xent_shift_invariance():
    for n in (2, 3, 7):
        for c in (-4.0, 0.0, 11.5):
            loss = T.softmax_cross_entropy(t64([c] * n), np.full(n, 1.0 / n))
            assert abs(loss.item() - np.log(n)) < 1e-12


def test_softmax_xent_rejects_unnormalized_weights():
    with pytest.raises(ContractError, match="sum"):
        T.softmax_cross_entropy(t64([0.0, 1.0]), [0.7, 0.7])
    with pytest.raises(ContractError, match="nonnegative"):
        T.softmax_cross_entropy(t64([0.0, 1.0]), [1.5, -0.5])


def test_softmax_xent_backward_is_softmax_minus_weights():
    rng = np.random.default_rng(3)
    logits = t64(rng.normal(size=(5, 7)))
    w = rng.dirichlet(np.ones(7), size=5)
    rows = T.softmax_cross_entropy_rows(logits, w)
    T.sum_all(rows).backward()
    z = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)
    assert np.max(np.abs(logits.grad - (p - w))) < 1e-6


# ---------------------------------------------------------------------------
# elementwise suite examples


def test_mean_over_axis_rows():
    out = T.mean_over_axis(t64([[1, 3], [5, 7]]), axis=0)
    assert np.array_equal(out.data, [3.0, 5.0])


def test_silu_at_zero():
    assert T.silu(t64([0.0])).data[0] == 0.0


def test_concat_vectors():
    out = T.concat([t64([1, 2]), t64([3])], axis=0)
    assert np.array_equal(out.data, [1.0, 2.0, 3.0])


def test_scalar_ops_and_no_broadcast():
    x = t64([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.mul(x, 2.0).data, x.data * 2)
    with pytest.raises(ShapeError, match=r"\(2, 2\).*\(2,\)"):
        T.add(x, t64([1.0, 2.0]))
    with pytest.raises(ShapeError, match="dtypes"):
        T.add(x, Tensor(np.zeros((2, 2), dtype=np.float32)))


# ---------------------------------------------------------------------------
# check_gradient harness


def test_check_gradient_sum_of_squares():
    x = t64([1.0, 2.0])
    err = check_gradient(lambda t: T.sum_all(T.mul(t, t)), x)
    assert err <= 1e-6
    loss = T.sum_all(T.mul(x, x))
    loss.backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_check_gradient_constant_function():
    err = check_gradient(lambda t: T.sum_all(T.mul(t, 0.0)), t64([1.0, -2.0, 3.0]))
    assert err == 0.0


def test_check_gradient_rejects_nonscalar():
    with pytest.raises(ContractError, match="scalar"):
        check_gradient(lambda t: T.mul(t, 2.0), t64([1.0, 2.0]))


# ---------------------------------------------------------------------------
# every registered op against finite differences, random shapes and seeds

SEEDS = range(8)


def _scalarize(out: Tensor, rng: np.random.Generator) -> Tensor:
    r = Tensor(rng.normal(size=out.shape).astype(np.float64))
    return T.sum_all(T.mul(out, r))


def _cases(rng: np.random.Generator):
    m, k, n = rng.integers(2, 5, size=3)
    x = rng.normal(size=(m, k))
    y = rng.normal(size=(k, n))
    same = rng.normal(size=(m, n))
    same2 = rng.normal(size=(m, n))
    pos = rng.uniform(0.5, 3.0, size=(m, n))
    batch = rng.normal(size=(2, m, k))
    batch2 = rng.normal(size=(2, k, n))
    gains = rng.uniform(0.5, 1.5, size=n)
    rope_x = rng.normal(size=(2, m, 4))
    cos, sin = np.cos(rng.normal(size=(m, 2))), np.sin(rng.normal(size=(m, 2)))
    mask = rng.random((m, n)) < 0.6
    mask[np.arange(m), rng.integers(0, n, m)] = True  # every row keeps an entry
    # keep max inputs away from ties so the subgradient is the gradient
    spread = same + np.arange(m * n).reshape(m, n) * 0.37
    weights = rng.dirichlet(np.ones(n), size=m) * mask
    weights = weights / weights.sum(axis=1, keepdims=True)
    return [
        ("add", lambda a, b: T.add(a, b), [same, same2]),
        ("sub", lambda a, b: T.sub(a, b), [same, same2]),
        ("mul", lambda a, b: T.mul(a, b), [same, same2]),
        ("div", lambda a, b: T.div(a, b), [same, pos]),
        ("neg", T.neg, [same]),
        ("add_scalar", lambda a: T.add(a, 1.7), [same]),
        ("mul_scalar", lambda a: T.mul(a, -0.3), [same]),
        ("matmul", T.matmul, [x, y]),
        ("matmul_batched", T.matmul, [batch, batch2]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [same, same2]),
        ("reshape", lambda a: T.reshape(a, (-1,)), [same]),
        ("transpose", lambda a: T.transpose(a, (1, 0)), [same]),
        ("slice_axis", lambda a: T.slice_axis(a, 1, 0, max(1, n // 2)), [same]),
        ("gather_rows", lambda a: T.gather_rows(a, np.array([0, m - 1, 0])), [same]),
        ("repeat_axis0", lambda a: T.repeat_axis0(a, 3), [same]),
        ("add_bias", T.add_bias, [same, rng.normal(size=n)]),
        ("mean_over_axis", lambda a: T.mean_over_axis(a, 1), [same]),
        ("sum_all_op", T.sum_all, [same]),
        ("max_over_axis", lambda a: T.max_over_axis(a, 1), [spread]),
        ("silu", T.silu, [same]),
        ("sqrt", T.sqrt, [pos]),
        ("log", T.log, [pos]),
        ("rms_norm", lambda a, g: T.rms_norm(a, g, 1e-8), [same, gains]),
        ("rope_rotate", lambda a: T.rope_rotate(a, cos, sin), [rope_x]),
        ("masked_softmax", lambda a: T.masked_softmax(a, mask), [same]),
        ("softmax_xent_rows", lambda a: T.softmax_cross_entropy_rows(a, weights, mask), [same]),
    ]


@pytest.mark.parametrize("seed", SEEDS)
def test_all_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, op, arrays in _cases(rng):
        tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
        scal_rng = np.random.default_rng(seed + 1000)
        _scalarize(op(*tensors), scal_rng).backward()
        for pos_i, tensor in enumerate(tensors):
            probe = tensor.data.copy()

            def loss():
                fresh = [Tensor(p.data if j != pos_i else probe, requires_grad=False) for j, p in enumerate(tensors)]
                with T.no_grad():
                    return _scalarize(op(*fresh), np.random.default_rng(seed + 1000)).item()

            numeric = fd_gradient(loss, probe)
            err = max_rel_err(tensor.grad, numeric)
            assert err <= 1e-4, f"{name} input {pos_i}: rel err {err:.2e} (seed {seed})"


# ---------------------------------------------------------------------------
# accumulation, determinism, bookkeeping


def _small_graph(x: Tensor) -> Tensor:
    return T.sum_all(T.silu(T.matmul(x, T.transpose(x, (1, 0)))))


def test_backward_twice_accumulates_exactly_double():
    x = t64(np.random.default_rng(0).normal(size=(3, 4)))
    loss = _small_graph(x)
    loss.backward()
    once = x.grad.copy()
    loss.backward()
    assert np.array_equal(x.grad, 2.0 * once)


def test_grad_zero_after_creation_and_zero_grad():
    x = t64([[1.0, 2.0]])
    assert np.array_equal(x.grad, np.zeros((1, 2)))
    _small_graph(x).backward()
    assert np.any(x.grad != 0)
    x.zero_grad()
    assert np.array_equal(x.grad, np.zeros((1, 2)))


def test_forward_replay_bit_identical():
    rng = np.random.default_rng(42)
    data = rng.normal(size=(6, 6))
    runs = []
    for _ in range(2):
        x = t64(data.copy())
        out = T.masked_softmax(T.matmul(x, x), np.tril(np.ones((6, 6), bool)))
        runs.append(out.data.tobytes())
    assert runs[0] == runs[1]


def test_debug_checks_flag_catches_nonfinite(debug_checks):
    with np.errstate(invalid="ignore"):
        with pytest.raises(ContractError, match="non-finite"):
            T.sqrt(t64([-1.0]))


def test_no_grad_suppresses_graph():
    x = t64([[1.0, 2.0]])
    with T.no_grad():
        out = T.mul(x, 3.0)
    assert out.node is None and not out.requires_grad
