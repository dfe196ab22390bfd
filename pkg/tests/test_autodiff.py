"""Tensor construction, tape mechanics, operator gradients, and grad_check."""

import math

import numpy as np
import pytest

import compnet as cn
from compnet import (DataError, ShapeError, TapeError, Tensor, Tape, add,
                     backward, from_array, grad_check, matmul, mul, reduce_sum,
                     reshape, sub, tensor_new, zeros, zeros_like)
from naive_ref import matmul_ref


# ---------------------------------------------------------------------------
# construction

def test_tensor_new_row_major():
    t = tensor_new([2, 3], [1, 2, 3, 4, 5, 6])
    assert t.shape == (2, 3)
    assert np.array_equal(t.data, [[1, 2, 3], [4, 5, 6]])


def test_tensor_new_degenerate():
    t = tensor_new([1], [0])
    assert t.shape == (1,)
    assert t.data[0] == 0.0


def test_tensor_new_count_mismatch():
    with pytest.raises(ShapeError):
        tensor_new([2, 2], [1, 2, 3])


def test_tensor_data_is_immutable():
    t = tensor_new([2], [1, 2])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_from_array_copies():
    a = np.array([[1.0, 2.0]])
    t = from_array(a)
    a[0, 0] = 99.0
    assert t.data[0, 0] == 1.0


def test_zeros_and_zeros_like():
    z = zeros([2, 2])
    assert np.array_equal(z.data, np.zeros((2, 2)))
    t = tensor_new([3], [1, 2, 3])
    assert zeros_like(t).shape == t.shape
    assert not zeros_like(t).data.any()


# ---------------------------------------------------------------------------
# reshape

def test_reshape_vector_to_matrix():
    t = tensor_new([6], [1, 2, 3, 4, 5, 6])
    r = reshape(t, [2, 3])
    assert np.array_equal(r.data, [[1, 2, 3], [4, 5, 6]])


def test_reshape_matrix_transposed_layout():
    t = tensor_new([2, 3], [1, 2, 3, 4, 5, 6])
    r = reshape(t, [3, 2])
    assert np.array_equal(r.data, [[1, 2], [3, 4], [5, 6]])


def test_reshape_count_mismatch():
    with pytest.raises(ShapeError):
        reshape(tensor_new([4], [1, 2, 3, 4]), [3, 2])


# ---------------------------------------------------------------------------
# elementwise ops

def test_mul_example():
    out = mul(tensor_new([3], [1, 2, 3]), tensor_new([3], [2, 2, 2]))
    assert np.array_equal(out.data, [2, 4, 6])


def test_add_zero_identity_is_exact():
    x = from_array(np.random.default_rng(0).normal(size=(3, 4)))
    out = add(x, zeros_like(x))
    assert np.array_equal(out.data, x.data)


def test_sub_self_is_zero():
    x = from_array(np.random.default_rng(1).normal(size=(5,)))
    assert not sub(x, x).data.any()


def test_elementwise_shape_mismatch():
    a = tensor_new([2], [1, 2])
    b = tensor_new([3], [1, 2, 3])
    for op in (add, sub, mul):
        with pytest.raises(ShapeError):
            op(a, b)


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    eye = from_array(np.eye(2))
    x = tensor_new([2, 2], [1, 2, 3, 4])
    assert np.array_equal(matmul(eye, x).data, [[1, 2], [3, 4]])


def test_matmul_row_times_ones():
    a = tensor_new([1, 3], [1, 2, 3])
    b = tensor_new([3, 1], [1, 1, 1])
    assert np.array_equal(matmul(a, b).data, [[6]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    out = matmul(from_array(a), from_array(b)).data
    assert np.max(np.abs(out - matmul_ref(a, b))) <= 1e-12


def test_matmul_rank_and_inner_mismatch():
    with pytest.raises(ShapeError):
        matmul(tensor_new([3], [1, 2, 3]), tensor_new([3], [1, 2, 3]))
    with pytest.raises(ShapeError):
        matmul(from_array(np.ones((2, 3))), from_array(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# reduce_sum

def test_reduce_sum_examples():
    assert reduce_sum(tensor_new([3], [1, 2, 3])).item() == 6.0
    assert reduce_sum(zeros([2, 2])).item() == 0.0


def test_reduce_sum_sequential_accumulation():
    rng = np.random.default_rng(3)
    vals = rng.normal(size=10)
    acc = 0.0
    for v in vals.reshape(-1):
        acc += float(v)
    assert reduce_sum(from_array(vals)).item() == acc


# ---------------------------------------------------------------------------
# backward

def test_grad_of_sum_of_squares():
    tape = Tape()
    x = tape.watch(tensor_new([3], [1, -2, 3]))
    loss = reduce_sum(mul(x, x))
    grads = backward(loss)
    assert np.array_equal(grads[x.node_id].data, [2, -4, 6])


def test_grad_of_plain_sum_is_ones():
    tape = Tape()
    x = tape.watch(from_array(np.random.default_rng(2).normal(size=(2, 3))))
    grads = backward(reduce_sum(x))
    assert np.array_equal(grads[x.node_id].data, np.ones((2, 3)))


def test_grad_accumulates_over_reuse():
    tape = Tape()
    x = tape.watch(tensor_new([2], [1.0, 2.0]))
    grads = backward(reduce_sum(add(x, x)))
    assert np.array_equal(grads[x.node_id].data, [2, 2])


def test_untouched_leaf_gets_zero_grad():
    tape = Tape()
    x = tape.watch(tensor_new([2], [1.0, 2.0]))
    y = tape.watch(tensor_new([2], [3.0, 4.0]))
    grads = backward(reduce_sum(mul(x, x)))
    assert not grads[y.node_id].data.any()


def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    x = tape.watch(tensor_new([2], [1.0, 2.0]))
    with pytest.raises(ShapeError):
        backward(add(x, x))


def test_backward_rejects_untracked_loss():
    x = tensor_new([2], [1.0, 2.0])
    with pytest.raises(TapeError):
        backward(reduce_sum(x))


def test_ops_reject_tensors_from_different_tapes():
    t1, t2 = Tape(), Tape()
    x = t1.watch(tensor_new([2], [1.0, 2.0]))
    y = t2.watch(tensor_new([2], [3.0, 4.0]))
    with pytest.raises(TapeError):
        add(x, y)


def test_forward_is_deterministic():
    x = from_array(np.random.default_rng(4).normal(size=(3, 3)))
    y = from_array(np.random.default_rng(5).normal(size=(3, 3)))
    a = matmul(x, y).data
    b = matmul(x, y).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# grad_check

def test_grad_check_quadratic():
    report = grad_check(lambda x: reduce_sum(mul(x, x)),
                        tensor_new([2], [1.0, 2.0]), step=1e-5)
    assert report.passed
    assert report.max_rel_err <= 1e-8


def test_grad_check_linear_is_exact_to_rounding():
    report = grad_check(reduce_sum, tensor_new([3], [0.3, -1.2, 2.5]))
    assert report.passed
    assert report.max_rel_err <= 1e-9


def test_grad_check_leaky_relu_away_from_kink():
    point = tensor_new([4], [-2.0, -0.5, 0.7, 3.0])  # all |x| > 10 * step
    report = grad_check(lambda x: reduce_sum(cn.leaky_relu(x)), point,
                        step=1e-5, tol=1e-6)
    assert report.passed


def test_grad_check_composite_graph():
    rng = np.random.default_rng(11)
    kernels = from_array(rng.normal(scale=0.5, size=(2, 1, 3, 3)))
    kbias = from_array(rng.normal(scale=0.1, size=(2,)))
    w = from_array(rng.normal(scale=0.5, size=(2 * 3 * 3, 3)))
    b = from_array(rng.normal(scale=0.1, size=(3,)))

    def f(x):
        conv = cn.conv2d(x, cn.ConvParams(kernels, kbias))
        pooled = cn.maxpool2d(conv)
        flat = reshape(pooled, [2, 2 * 3 * 3])
        return reduce_sum(cn.dense(flat, cn.DenseParams(w, b)))

    point = from_array(rng.normal(size=(2, 1, 8, 8)))
    report = grad_check(f, point, step=1e-5, tol=1e-6)
    assert report.passed, f"max rel err {report.max_rel_err}"
