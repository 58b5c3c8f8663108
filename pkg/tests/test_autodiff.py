"""Tensor op oracles: hand-computed values, a triple-loop matmul reference,
and float64 finite differences for every backward rule."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vidcloze.autodiff as ad
from vidcloze.autodiff import (DegenerateBatchError, ShapeError, Tensor,
                               backward, bce_with_logits, concat,
                               cross_entropy, dropout, embedding, gather_rows,
                               gelu, layer_norm, linear, matmul, no_grad,
                               relu, reshape, softmax_rows, tmean, transpose,
                               tsum)
from vidcloze.rng import RngStream


def t64(x, rg=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=rg)


def numeric_grad(f, x, h=1e-6):
    """Central difference of scalar f at every element of x (float64)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def analytic_grad(op, *tensors):
    for t in tensors:
        t.grad = None
    backward(tsum(op(*tensors)))
    return [t.grad for t in tensors]


def check_op_grads(op, *arrays, tol=1e-6):
    tensors = [t64(a) for a in arrays]
    grads = analytic_grad(op, *tensors)
    for t, g in zip(tensors, grads):
        num = numeric_grad(lambda: float(op(*tensors).data.sum()), t.data)
        assert g is not None
        np.testing.assert_allclose(g, num, atol=tol, rtol=tol)


# -- hand oracles ---------------------------------------------------------

def test_matmul_hand_value():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    ref = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, ref, rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_hand_value():
    out = softmax_rows(Tensor([0.0, math.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=1e-6)


def test_layer_norm_hand_value():
    out = layer_norm(Tensor([1.0, -1.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.9999950000374997, -0.9999950000374997],
                               rtol=1e-9)


def test_cross_entropy_hand_values():
    two_way = cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
    assert two_way.item() == pytest.approx(math.log(2.0), rel=1e-6)
    tilted = cross_entropy(Tensor([[1.0, 0.0]]), np.array([0]))
    assert tilted.item() == pytest.approx(math.log(1.0 + math.exp(-1.0)), rel=1e-6)
    assert tilted.item() == pytest.approx(0.3132617, abs=1e-6)


def test_square_gradient_at_three():
    x = t64(3.0)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_shared_subexpression_grads_sum():
    x = t64(2.0)
    y = x * x      # dy/dx = 4 at x=2
    z = y + y      # each use contributes
    backward(z)
    assert x.grad == pytest.approx(8.0)


def test_no_path_leaves_grad_absent():
    x, y = t64(1.0), t64(5.0)
    backward(x * x)
    assert y.grad is None


def test_no_grad_blocks_graph():
    x = t64(2.0)
    with no_grad():
        y = x * x
    assert not y.requires_grad
    assert y._backward_fn is None


def test_backward_rejects_nonscalar():
    with pytest.raises(ShapeError):
        backward(t64([1.0, 2.0]))


# -- finite-difference checks per op --------------------------------------

def test_grad_add_broadcast():
    check_op_grads(lambda a, b: ad.add(a, b),
                   np.random.default_rng(1).standard_normal((3, 4)),
                   np.random.default_rng(2).standard_normal(4))


def test_grad_mul():
    check_op_grads(ad.mul,
                   np.random.default_rng(3).standard_normal((2, 3)),
                   np.random.default_rng(4).standard_normal((2, 3)))


def test_grad_matmul_batched():
    check_op_grads(matmul,
                   np.random.default_rng(5).standard_normal((2, 3, 4)),
                   np.random.default_rng(6).standard_normal((4, 5)))


def test_grad_softmax():
    check_op_grads(lambda x: softmax_rows(x),
                   np.random.default_rng(7).standard_normal((3, 5)))


def test_grad_layer_norm_all_inputs():
    rng = np.random.default_rng(8)
    check_op_grads(layer_norm, rng.standard_normal((4, 6)),
                   rng.standard_normal(6), rng.standard_normal(6), tol=1e-5)


def test_grad_gelu_relu():
    x = np.random.default_rng(9).standard_normal((3, 4))
    check_op_grads(gelu, x)
    check_op_grads(relu, x + 0.05)  # keep away from the kink


def test_grad_reshape_transpose_concat():
    rng = np.random.default_rng(10)
    check_op_grads(lambda x: reshape(x, (6, 2)), rng.standard_normal((3, 4)))
    check_op_grads(lambda x: transpose(x), rng.standard_normal((3, 4)))
    check_op_grads(lambda x: transpose(x, (1, 0, 2)), rng.standard_normal((2, 3, 4)))
    check_op_grads(lambda a, b: concat([a, b], axis=0),
                   rng.standard_normal((2, 3)), rng.standard_normal((4, 3)))


def test_grad_embedding_with_repeats():
    table = t64(np.random.default_rng(11).standard_normal((5, 3)))
    ids = np.array([0, 2, 2, 4])
    backward(tsum(embedding(table, ids)))
    expect = np.zeros((5, 3))
    for i in ids:
        expect[i] += 1.0
    np.testing.assert_allclose(table.grad, expect)


def test_grad_gather_rows():
    x = t64(np.random.default_rng(12).standard_normal((6, 3)))
    backward(tsum(gather_rows(x, np.array([1, 1, 5]))))
    expect = np.zeros((6, 3))
    expect[1] = 2.0
    expect[5] = 1.0
    np.testing.assert_allclose(x.grad, expect)


def test_grad_cross_entropy_with_ignore():
    rng = np.random.default_rng(13)
    logits = rng.standard_normal((5, 7))
    targets = np.array([1, 0, 3, 6, 2])
    ignore = np.array([False, True, False, True, False])

    def op(x):
        return cross_entropy(x, targets, ignore=ignore)

    check_op_grads(op, logits)
    x = t64(logits)
    backward(op(x))
    assert np.all(x.grad[ignore] == 0.0)


def test_grad_bce_with_logits():
    rng = np.random.default_rng(14)
    logits = rng.standard_normal(6)
    labels = (rng.random(6) > 0.5).astype(float)
    check_op_grads(lambda x: bce_with_logits(x, labels), logits)


def test_grad_mean():
    check_op_grads(tmean, np.random.default_rng(15).standard_normal((3, 4)))


def test_grad_linear_bias():
    rng = np.random.default_rng(16)
    check_op_grads(lambda x, w, b: linear(x, w, b),
                   rng.standard_normal((3, 4)), rng.standard_normal((4, 2)),
                   rng.standard_normal(2))


# -- degenerate and masking behavior --------------------------------------

def test_cross_entropy_all_ignored_raises():
    with pytest.raises(DegenerateBatchError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1]),
                      ignore=np.array([True, True]))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


def test_additive_mask_bias_zeroes_attention_exactly():
    # exp(x - max) underflows to 0.0 for masked scores offset by -1e9,
    # which is what makes padding bit-invisible downstream.
    scores = Tensor(np.array([[1.0, 2.0, -1e9]], dtype=np.float32))
    probs = softmax_rows(scores).data
    assert probs[0, 2] == 0.0
    assert probs[0, :2].sum() == pytest.approx(1.0)


def test_dropout_zero_rate_is_identity_and_seeded():
    x = Tensor(np.ones((4, 4), dtype=np.float32), requires_grad=True)
    assert dropout(x, 0.0, None) is x
    a = dropout(x, 0.5, RngStream(7, "d")).data
    b = dropout(x, 0.5, RngStream(7, "d")).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_forward_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(17)
    x = Tensor(rng.standard_normal((4, 8)).astype(np.float32) * 50)
    for out in (softmax_rows(x), gelu(x),
                layer_norm(x, Tensor(np.ones(8, np.float32)),
                           Tensor(np.zeros(8, np.float32)))):
        assert np.all(np.isfinite(out.data))


# -- properties -----------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8),
       st.floats(-100, 100))
def test_softmax_shift_invariance_and_normalization(row, shift):
    x = np.asarray(row, dtype=np.float64)
    p = softmax_rows(Tensor(x)).data
    q = softmax_rows(Tensor(x + shift)).data
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(p, q, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6))
def test_matmul_agrees_with_numpy(m, n):
    rng = np.random.default_rng(m * 31 + n)
    a, b = rng.standard_normal((m, n)), rng.standard_normal((n, m))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-12)
