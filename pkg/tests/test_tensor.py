import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from playerembed import tensor as T
from playerembed.tensor import ShapeError, Tape, Tensor, grad_check


def param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def test_tensor_shape_invariants():
    t = Tensor([[1, 2, 3], [4, 5, 6]])
    assert t.shape == (2, 3) and t.size == 6
    assert t.data.dtype == np.float64
    with pytest.raises(ShapeError):
        t.item()


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    b = Tensor([[3, 4], [5, 6]])
    np.testing.assert_array_equal(T.matmul(eye, b).data, b.data)
    assert T.matmul(Tensor([[1, 2, 3]]), Tensor([[1], [1], [1]])).data.tolist() == [[6.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum(rng):
    a, b = param(rng, 4, 5), param(rng, 5, 3)
    with Tape() as tape:
        loss = T.total(T.matmul(a, b))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((4, 3)), atol=1e-12)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all()
    np.testing.assert_allclose(big, [[1.0, math.exp(-1000.0)]], atol=1e-300)


def test_softmax_nan_propagates():
    out = T.softmax_rows(Tensor([[np.nan, 0.0]])).data
    assert np.isnan(out).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_stochastic_and_shift_invariant(x, c):
    p = T.softmax_rows(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, p, atol=1e-12)


def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((2, 5), 3.7))
    out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_layer_norm_row_mean_equals_bias_mean(rng):
    bias = rng.standard_normal(6)
    out = T.layer_norm(Tensor(rng.standard_normal((3, 6))), Tensor(np.ones(6)), Tensor(bias)).data
    np.testing.assert_allclose(out.mean(axis=1), bias.mean(), atol=1e-12)
    centered = out - bias
    np.testing.assert_allclose(centered.var(axis=1), 1.0, atol=1e-4)


def test_cross_entropy_examples():
    V = 7
    logits = np.full((3, V), -50.0)
    targets = np.array([1, 4, 2])
    logits[np.arange(3), targets] = 50.0
    mask = np.array([True, True, False])
    assert T.cross_entropy_masked(Tensor(logits), targets, mask).item() < 1e-12
    uniform = T.cross_entropy_masked(Tensor(np.zeros((3, V))), targets, mask).item()
    assert uniform == pytest.approx(math.log(V), abs=1e-12)


def test_cross_entropy_two_positions_hand_value(rng):
    logits = rng.standard_normal((4, 5))
    targets = np.array([0, 3, 1, 2])
    mask = np.array([False, True, False, True])
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    want = -(math.log(p[1, 3]) + math.log(p[3, 2])) / 2
    assert T.cross_entropy_masked(Tensor(logits), targets, mask).item() == pytest.approx(want, abs=1e-12)


def test_cross_entropy_empty_mask_errors():
    with pytest.raises(ValueError):
        T.cross_entropy_masked(Tensor(np.zeros((2, 3))), [0, 1], [False, False])


def test_backward_touches_exactly_requires_grad(rng):
    a = param(rng, 3, 4)
    frozen = Tensor(rng.standard_normal((4, 2)))
    g, b = param(rng, 2), param(rng, 2)
    with Tape() as tape:
        h = T.layer_norm(T.matmul(a, frozen), g, b)
        loss = T.total(T.gelu(h))
    visited = tape.backward(loss)
    assert sorted(visited) == sorted(r.op for r in tape.records)
    assert len(visited) == len(tape.records)
    assert frozen.grad is None
    for t in (a, g, b):
        assert t.grad is not None and t.grad.shape == t.shape


def test_no_recording_without_requires_grad(rng):
    with Tape() as tape:
        T.matmul(Tensor(rng.standard_normal((2, 2))), Tensor(rng.standard_normal((2, 2))))
    assert len(tape) == 0


def test_grad_check_linear_is_exact(rng):
    a = param(rng, 3, 3)
    w = Tensor(rng.standard_normal((3, 2)))
    assert grad_check(lambda x: T.matmul(x, w), [a]) < 1e-8


OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: T.scale(a, -1.7), [(2, 5)]),
    "gelu": (lambda a: T.gelu(a), [(3, 4)]),
    "total": (lambda a: T.total(a), [(3, 4)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(4, 5), (5, 3)]),
    "matmul_batched": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 2)]),
    "matmul_t": (lambda a, b: T.matmul_t(a, b), [(4, 5), (3, 5)]),
    "softmax_rows": (lambda a: T.softmax_rows(a), [(3, 6)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(4, 6), (6,), (6,)]),
    "softmax_matmul": (lambda a, b: T.softmax_rows(T.matmul(a, b)), [(3, 4), (4, 5)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradcheck_ops(name, rng):
    fn, shapes = OPS[name]
    inputs = [param(rng, *s) for s in shapes]
    assert grad_check(fn, inputs) < 1e-4


def test_gradcheck_embedding(rng):
    table = param(rng, 6, 3)
    ids = np.array([0, 2, 2, 5])
    assert grad_check(lambda t: T.embedding(t, ids), [table]) < 1e-4


def test_gradcheck_cross_entropy(rng):
    logits = param(rng, 5, 7)
    targets = rng.integers(0, 7, 5)
    mask = np.array([True, False, True, True, False])
    assert grad_check(lambda z: T.cross_entropy_masked(z, targets, mask), [logits]) < 1e-4
    assert grad_check(lambda z: T.cross_entropy_masked(z, targets, mask, normalizer=11.0), [logits]) < 1e-4


def test_dropout_identity_without_rng(rng):
    x = param(rng, 3, 3)
    assert T.dropout(x, 0.5, None) is x
    out = T.dropout(x, 0.5, np.random.default_rng(0)).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], x.data[kept] * 2.0)


def test_gradcheck_dropout_fixed_mask(rng):
    x = param(rng, 4, 4)
    assert grad_check(lambda a: T.dropout(a, 0.3, np.random.default_rng(9)), [x]) < 1e-4
