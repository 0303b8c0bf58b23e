from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loralab import autodiff as ad
from loralab.autodiff import Tape, Tensor, backward, grad_check, no_grad
from loralab.errors import ContractError, DegenerateBatchError, DimensionError, NumericError


def rnd(*shape, seed=0, scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(0.0, scale, shape))


def positive(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0.5, 2.0, shape))


# one scalar-valued composition per op; each closes over fixed indices/masks
OP_CASES = {
    "add": (lambda a, b: ad.sum_(ad.add(a, b) * ad.add(a, b)), [rnd(3, 4), rnd(4, seed=1)]),
    "sub": (lambda a, b: ad.sum_(ad.sub(a, b) * a), [rnd(3, 4), rnd(1, 4, seed=1)]),
    "mul": (lambda a, b: ad.sum_(ad.mul(a, b)), [rnd(2, 3), rnd(2, 3, seed=1)]),
    "relu": (lambda a: ad.sum_(ad.relu(a) * a), [rnd(5, seed=2)]),
    "sigmoid": (lambda a: ad.sum_(ad.sigmoid(a)), [rnd(6)]),
    "log_sigmoid": (lambda a: ad.sum_(ad.log_sigmoid(a)), [rnd(6, scale=5.0)]),
    "log": (lambda a: ad.sum_(ad.log(a)), [positive(4)]),
    "exp": (lambda a: ad.sum_(ad.exp(a)), [rnd(4)]),
    "clip": (lambda a: ad.sum_(ad.clip(a, -0.5, 0.5) * a), [Tensor([-1.3, -0.2, 0.1, 0.9])]),
    "mean": (lambda a: ad.mean(a * a, axis=1).sum(), [rnd(3, 4)]),
    "reshape": (lambda a: ad.sum_(ad.reshape(a, (4, 3)) * rnd(4, 3, seed=9)), [rnd(3, 4)]),
    "transpose": (lambda a: ad.sum_(ad.transpose(a, (1, 0, 2)) * rnd(3, 2, 4, seed=9)), [rnd(2, 3, 4)]),
    "take": (lambda a: ad.sum_(ad.take(a, [2, 0, 2], axis=1) * rnd(3, 3, seed=4)), [rnd(3, 4)]),
    "gather_last": (lambda a: ad.sum_(ad.gather_last(a, np.array([[1, 0], [3, 3]])) * 2.0),
                    [rnd(2, 2, 4)]),
    "matmul": (lambda a, b: ad.sum_(ad.matmul(a, b) * ad.matmul(a, b)), [rnd(2, 3, 4), rnd(4, 5, seed=1)]),
    "embedding_lookup": (lambda t: ad.sum_(ad.embedding_lookup(t, [[0, 2, 2]]) * rnd(1, 3, 4, seed=3)),
                         [rnd(5, 4)]),
    "layer_norm": (lambda x, g, b: ad.sum_(ad.layer_norm(x, g, b) * rnd(2, 5, seed=7)),
                   [rnd(2, 5), rnd(5, seed=1), rnd(5, seed=2)]),
    "log_softmax": (lambda a: ad.sum_(ad.log_softmax(a) * rnd(3, 5, seed=5)), [rnd(3, 5)]),
    "softmax": (lambda a: ad.sum_(ad.softmax(a, np.tril(np.ones((4, 4), bool))) * rnd(4, 4, seed=5)),
                [rnd(4, 4)]),
    "softmax_cross_entropy": (lambda a: ad.softmax_cross_entropy(a, [[1, 2, 0]], [[1, 0, 1]]),
                              [rnd(1, 3, 6)]),
    "sequence_logprobs": (lambda a: ad.sum_(ad.sequence_logprobs(a, [[1, 2], [0, 5]], [[1, 1], [0, 1]])),
                          [rnd(2, 2, 6)]),
    "token_logprobs": (lambda a: ad.sum_(ad.token_logprobs(a, [4, 0, 4]) * Tensor([1.0, -2.0, 0.5])),
                       [rnd(3, 5)]),
    "segment_sum": (lambda a: ad.sum_(ad.segment_sum(a, [0, 2, 0, 1], 3) * Tensor([1.0, 2.0, -3.0])),
                    [rnd(4)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_grad_check_every_op(name):
    fn, inputs = OP_CASES[name]
    assert grad_check(fn, inputs) < 1e-4


def test_sum_of_squares_gradient_is_twice_input():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape():
        loss = ad.sum_(x * x)
        backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])


def test_matmul_gradient_matches_outer_product_rule():
    A = rnd(3, 4)
    B = rnd(4, 2, seed=1)
    A.requires_grad = B.requires_grad = True
    with Tape():
        backward(ad.sum_(ad.matmul(A, B)))
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.data.T)
    np.testing.assert_allclose(B.grad, A.data.T @ np.ones((3, 2)))


def test_reused_input_accumulates_gradient():
    x = Tensor([0.5], requires_grad=True)
    with Tape():
        backward(ad.sum_(x * x + x * 3.0))
    np.testing.assert_allclose(x.grad, [4.0])


def test_backward_twice_raises():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = ad.sum_(x * x)
        backward(loss)
        with pytest.raises(ContractError):
            backward(loss)


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        with pytest.raises(ContractError):
            backward(x * 2.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = x * 2.0
    assert len(tape) == 0 and y._tape is None


def test_untracked_inputs_record_nothing():
    with Tape() as tape:
        ad.matmul(rnd(2, 2), rnd(2, 2))
    assert len(tape) == 0


def test_frozen_operand_gets_no_grad():
    w = rnd(3, 3)
    x = rnd(2, 3, seed=1)
    x.requires_grad = True
    with Tape():
        backward(ad.sum_(ad.matmul(x, w)))
    assert w.grad is None and x.grad is not None


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(rnd(2, 3), rnd(2, 3))


def test_non_finite_input_raises():
    with pytest.raises(NumericError):
        ad.log_softmax(Tensor([1.0, np.nan]))


def test_empty_loss_mask_raises():
    with pytest.raises(DegenerateBatchError):
        ad.softmax_cross_entropy(rnd(1, 2, 4), [[0, 1]], [[0, 0]])


def test_uniform_logits_cross_entropy_is_log_vocab():
    loss = ad.softmax_cross_entropy(Tensor(np.zeros((3, 256))), [1, 2, 3], [1, 1, 1])
    assert abs(loss.item() - math.log(256)) < 1e-12


def test_masked_softmax_zeroes_masked_entries():
    p = ad.softmax(rnd(3, 3), np.tril(np.ones((3, 3), bool))).data
    assert np.all(p[np.triu_indices(3, 1)] == 0.0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0)


def test_grad_check_flags_a_wrong_rule():
    def bad_square(x):
        return ad._emit(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    assert grad_check(lambda x: ad.sum_(bad_square(x)), [rnd(3)]) > 0.1


def test_grad_check_restores_inputs():
    x = rnd(3)
    before = x.data.copy()
    grad_check(lambda t: ad.sum_(ad.exp(t)), [x])
    np.testing.assert_array_equal(x.data, before)
    assert not x.requires_grad and x.grad is None


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(Tensor(x[None, :])).data
    assert abs(p.sum() - 1.0) < 1e-12 and np.all(p >= 0)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)))
def test_log_softmax_matches_log_of_softmax(x):
    lp = ad.log_softmax(Tensor(x)).data
    ref = x - x.max() - np.log(np.exp(x - x.max()).sum())
    np.testing.assert_allclose(lp, ref, atol=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6),
       st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_add_broadcast_gradient_shape(a, b):
    x = Tensor(np.array(a)[:, None], requires_grad=True)
    y = Tensor(np.array(b)[None, :], requires_grad=True)
    with Tape():
        backward(ad.sum_(x + y))
    assert x.grad.shape == x.shape and y.grad.shape == y.shape
    np.testing.assert_allclose(x.grad, len(b))
    np.testing.assert_allclose(y.grad, len(a))


def test_matmul_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), m).data, m.data)
    np.testing.assert_array_equal(ad.matmul(m, Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.zeros((2, 2))), rnd(2, 2)).data, np.zeros((2, 2)))


def test_small_op_examples():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    uniform = ad.softmax_cross_entropy(Tensor(np.zeros((4, 8))), [0, 3, 5, 7], [1, 1, 1, 1])
    assert abs(uniform.item() - math.log(8)) < 1e-12
    np.testing.assert_array_equal(ad.layer_norm(Tensor(np.full(5, 3.7))).data, np.zeros(5))


def test_backward_examples():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape():
        backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    B = Tensor([[1.0, -1.0], [2.0, 0.5]], requires_grad=True)
    with Tape():
        backward(ad.sum_(ad.matmul(Tensor(np.eye(2)), B)))
    np.testing.assert_array_equal(B.grad, np.ones((2, 2)))


def test_grad_check_examples():
    assert grad_check(lambda x: ad.sum_(x * x), [rnd(3, 3)]) < 1e-6
    assert grad_check(lambda z: ad.softmax_cross_entropy(z, [1, 0, 4], [1, 1, 1]), [rnd(3, 6)]) < 1e-5
    assert grad_check(lambda x: ad.sum_(x * 0.0) + 2.0, [rnd(2)]) == 0.0
