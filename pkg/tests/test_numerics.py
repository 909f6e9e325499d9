import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from squat import numerics as nx
from squat.errors import ContractError, ShapeError
from squat.numerics import Tensor

SEEDS = range(20)


def fd_check(build, arrays, seed, h=1e-5, tol=1e-4):
    """Scalar loss sum(build(*tensors) * R) checked against central differences on every input."""
    rng = np.random.default_rng(1000 + seed)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    probe = build(*tensors).data
    R = rng.normal(size=probe.shape)

    def loss_value():
        return float((build(*tensors).data * R).sum())

    with nx.Tape() as tape:
        loss = nx.total(nx.mul(build(*tensors), Tensor(R)))
    grads = nx.backward(loss, tape)
    worst = 0.0
    for t in tensors:
        numeric = nx.central_difference(loss_value, t.data, range(t.data.size), h)
        err = nx.relative_error(grads[t].reshape(-1), numeric)
        worst = max(worst, float(err.max()))
    assert worst < tol


def _shape(rng, lo=1, hi=5):
    return int(rng.integers(lo, hi + 1))


# ---------------------------------------------------------------- examples

def test_matmul_identity_and_annihilation():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    z = nx.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[0.0], [5.0]]))
    assert np.array_equal(z.data, [[0.0], [0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_tight():
    rng = np.random.default_rng(7)
    a, b = Tensor(rng.normal(size=(3, 4)), True), Tensor(rng.normal(size=(4, 2)), True)
    with nx.Tape() as tape:
        loss = nx.total(nx.matmul(a, b))
    g = nx.backward(loss, tape)
    f = lambda: float((a.data @ b.data).sum())
    for t in (a, b):
        num = nx.central_difference(f, t.data, range(t.data.size))
        assert nx.relative_error(g[t].reshape(-1), num).max() < 1e-6


def test_softmax_examples():
    assert np.allclose(nx.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, 1 / 3, atol=1e-15)
    big = nx.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert abs(big[0, 0] - 1.0) < 1e-12 and abs(big[0, 1]) < 1e-12
    logs = nx.softmax_rows(Tensor([[math.log(1), math.log(2), math.log(3)]])).data
    assert np.allclose(logs, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-15)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(nx.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), one, zero).data, np.zeros((1, 4)))
    y = nx.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    expect = 1.0 / math.sqrt(1.0 + 1e-5)
    assert np.allclose(y, [[expect, -expect]], atol=1e-15)


def test_layer_norm_gradient_tight():
    rng = np.random.default_rng(3)
    x, g, b = Tensor(rng.normal(size=(2, 8)), True), Tensor(rng.normal(size=8), True), Tensor(rng.normal(size=8), True)
    R = rng.normal(size=(2, 8))
    with nx.Tape() as tape:
        loss = nx.total(nx.mul(nx.layer_norm(x, g, b), Tensor(R)))
    grads = nx.backward(loss, tape)
    f = lambda: float((nx.layer_norm(x, g, b).data * R).sum())
    for t in (x, g, b):
        num = nx.central_difference(f, t.data, range(t.data.size))
        assert nx.relative_error(grads[t].reshape(-1), num).max() < 1e-6


def test_gelu_examples():
    assert nx.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(nx.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-4
    expect = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
    assert nx.gelu(Tensor([1.0])).data[0] == pytest.approx(expect, abs=1e-15)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    with nx.Tape() as tape:
        loss = nx.total(x)
    assert np.array_equal(nx.backward(loss, tape)[x], np.ones((2, 2)))


def test_gather_routes_gradient_to_selected_rows_only():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    with nx.Tape() as tape:
        loss = nx.total(nx.gather_rows(x, [0]))
    g = nx.backward(loss, tape)[x]
    assert np.array_equal(g[0], np.ones(4))
    assert np.array_equal(g[1:], np.zeros((2, 4)))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with nx.Tape() as tape:
        y = nx.scale(x, 2.0)
    with pytest.raises(ContractError):
        nx.backward(y, tape)


def test_unreached_tensor_gets_exact_zero():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    with nx.Tape() as tape:
        loss = nx.total(a)
    g = nx.backward(loss, tape)
    assert np.array_equal(g[b], np.zeros((2, 2)))
    assert b not in g


def test_tape_records_in_execution_order_and_nothing_outside():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    nx.scale(x, 2.0)  # outside a tape: not recorded anywhere
    with nx.Tape() as tape:
        y = nx.scale(x, 2.0)
        z = nx.total(y)
    assert [r[0] for r in tape.records] == [y, z]


def test_top_k_gather_exclusive_producers_get_zero():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    keep = np.argsort(-x.data[:, 0])[:2]
    with nx.Tape() as tape:
        h = nx.matmul(x, w)
        loss = nx.total(nx.gelu(nx.gather_rows(h, keep)))
    g = nx.backward(loss, tape)[x]
    dropped = np.setdiff1d(np.arange(5), keep)
    assert np.all(g[dropped] == 0.0)
    assert np.any(g[keep] != 0.0)


# ---------------------------------------------------------------- finite differences, 20 seeds

@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_and_linear_ops_gradients(seed):
    rng = np.random.default_rng(seed)
    m, k, n = _shape(rng), _shape(rng), _shape(rng)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    fd_check(nx.matmul, [a, b], seed)
    fd_check(lambda x, y: nx.add(x, y), [a, rng.normal(size=(k,))], seed)
    fd_check(lambda x, y: nx.sub(x, y), [a, rng.normal(size=(m, k))], seed)
    fd_check(lambda x, y: nx.mul(x, y), [a, rng.normal(size=(1, k))], seed)
    fd_check(lambda x: nx.scale(x, -1.7), [a], seed)
    fd_check(nx.gelu, [a * 2], seed)
    fd_check(lambda x, w, c: nx.linear(x, w, c), [a, b, rng.normal(size=n)], seed)
    fd_check(nx.transpose, [a], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_structural_ops_gradients(seed):
    rng = np.random.default_rng(seed)
    m, d = _shape(rng, 2, 5), 2 * _shape(rng)
    x = rng.normal(size=(m, d))
    idx = rng.choice(m, size=_shape(rng, 1, m), replace=False)
    fd_check(lambda t: nx.gather_rows(t, idx), [x], seed)
    fd_check(lambda t, r: nx.scatter_rows(t, idx, r), [x, rng.normal(size=(len(idx), d))], seed)
    fd_check(lambda t, u: nx.concat([t, u]), [x, rng.normal(size=(m, 3))], seed)
    fd_check(lambda t: nx.columns(t, 1, d), [x], seed)
    fd_check(nx.mean_rows, [x], seed)
    fd_check(lambda t: nx.repeat_rows(t, 3), [rng.normal(size=(1, d))], seed)
    fd_check(nx.mean, [x], seed)
    fd_check(lambda t: nx.reshape(t, (d, m)), [x], seed)
    fd_check(lambda t: nx.merge_heads(nx.split_heads(nx.scale(t, 2.0), 2)), [x], seed)
    fd_check(lambda t: nx.split_heads(t, 2), [x], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_normalisation_and_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    m, d = _shape(rng, 1, 5), _shape(rng, 2, 7)
    x = rng.normal(size=(m, d)) * 3
    fd_check(nx.softmax_rows, [x], seed)
    fd_check(lambda t: nx.softmax_rows(t), [rng.normal(size=(2, m, d))], seed)
    fd_check(lambda t, g, b: nx.layer_norm(t, g, b), [x, rng.normal(size=d), rng.normal(size=d)], seed)
    targets = rng.integers(0, d, size=m)
    fd_check(lambda t: nx.softmax_cross_entropy(t, targets), [x], seed)
    labels = (rng.random(m) < 0.5).astype(float)
    fd_check(lambda t: nx.bce_with_logits(t, labels), [rng.normal(size=m) * 4], seed)
    fd_check(lambda a, b: nx.stack_scalars([nx.total(a), nx.mean(b)]), [x, rng.normal(size=(2, 2))], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_batched_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    h, m, k, n = _shape(rng, 1, 3), _shape(rng), _shape(rng), _shape(rng)
    fd_check(nx.matmul, [rng.normal(size=(h, m, k)), rng.normal(size=(h, k, n))], seed)


# ---------------------------------------------------------------- properties

@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = nx.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50, allow_nan=False)))
def test_forward_ops_are_finite_and_deterministic(x):
    one, zero = Tensor(np.ones(5)), Tensor(np.zeros(5))
    for op in (nx.gelu, nx.softmax_rows, lambda t: nx.layer_norm(t, one, zero)):
        a, b = op(Tensor(x)).data, op(Tensor(x.copy())).data
        assert np.all(np.isfinite(a))
        assert np.array_equal(a, b)


def test_make_rng_streams_are_reproducible_and_independent():
    a = nx.make_rng(5, "init", "layers.0.n2n.W_q").normal(size=4)
    b = nx.make_rng(5, "init", "layers.0.n2n.W_q").normal(size=4)
    c = nx.make_rng(5, "init", "layers.0.n2n.W_k").normal(size=4)
    d = nx.make_rng(6, "init", "layers.0.n2n.W_q").normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_relative_error_floor():
    assert nx.relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(1e-3)
    assert nx.relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5
