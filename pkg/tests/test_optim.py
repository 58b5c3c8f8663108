"""Adam semantics: bias-corrected first step, frozen skip, missing-grad
error, schedule shapes."""

import numpy as np
import pytest

from vidcloze.autodiff import Tensor, backward, tsum
from vidcloze.optim import (AdamConfig, MissingGradError, Parameter,
                            ParamSnapshot, adam_step, warmup_then_constant,
                            warmup_then_linear_decay)


def make_param(values, name="p", frozen=False):
    return Parameter(np.asarray(values, dtype=np.float32), name, frozen=frozen)


def test_first_step_magnitude_is_learning_rate():
    # With constant gradient g, bias correction gives m_hat = g, v_hat = g^2,
    # so the first update is lr * g / (|g| + eps) = lr * sign(g), near exactly.
    p = make_param([0.0, 0.0])
    p.tensor.grad = np.array([2.0, -0.5], dtype=np.float32)
    adam_step([p], AdamConfig(learning_rate=0.1))
    np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-5)
    assert p.grad is None
    assert p.optimizer_state["step"] == 1


def test_two_steps_same_gradient_keep_direction():
    p = make_param([1.0])
    for _ in range(2):
        p.tensor.grad = np.array([3.0], dtype=np.float32)
        adam_step([p], AdamConfig(learning_rate=0.05))
    assert p.data[0] == pytest.approx(1.0 - 2 * 0.05, rel=1e-4)


def test_frozen_param_bits_never_move():
    p = make_param([[1.25, -3.5]], frozen=True)
    before = p.data.tobytes()
    p.tensor.grad = np.array([[10.0, 10.0]], dtype=np.float32)
    adam_step([p], AdamConfig(learning_rate=1.0))
    assert p.data.tobytes() == before
    assert p.optimizer_state == {}
    assert p.grad is None  # grads still cleared so buffers don't accumulate


def test_missing_grad_on_trainable_raises_with_name():
    p = make_param([1.0], name="proj.weight")
    with pytest.raises(MissingGradError, match="proj.weight"):
        adam_step([p], AdamConfig(learning_rate=0.1))


def test_gradients_flow_through_frozen_parameters():
    frozen = make_param([[2.0]], name="frozen.w", frozen=True)
    trainable = make_param([[1.0]], name="train.w")
    loss = tsum(frozen.tensor @ trainable.tensor)
    backward(loss)
    assert frozen.grad is not None  # freezing is an optimizer-level contract
    assert trainable.grad[0, 0] == pytest.approx(2.0)


def test_weight_decay_is_decoupled():
    p = make_param([1.0])
    p.tensor.grad = np.array([0.0], dtype=np.float32)
    adam_step([p], AdamConfig(learning_rate=0.1, weight_decay=0.5))
    # zero gradient: update is purely the decay term lr * wd * w
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5 * 1.0, rel=1e-6)


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(learning_rate=0.1, beta1=1.0)
    with pytest.raises(ValueError):
        AdamConfig(learning_rate=0.1, epsilon=0.0)
    with pytest.raises(ValueError):
        AdamConfig(learning_rate=0.1, weight_decay=-1e-3)


def test_warmup_then_linear_decay_shape():
    total, peak = 100, 1.0
    lrs = [warmup_then_linear_decay(s, total, peak) for s in range(total)]
    assert lrs[9] == pytest.approx(peak)          # end of 10% warmup
    assert lrs[0] == pytest.approx(peak / 10)
    assert max(lrs) <= peak + 1e-12
    assert lrs[-1] == pytest.approx(peak * (1 - 89 / 90))
    assert all(a <= b + 1e-12 for a, b in zip(lrs[:10], lrs[1:10]))
    assert all(a >= b - 1e-12 for a, b in zip(lrs[10:], lrs[11:]))


def test_warmup_then_constant_shape():
    lrs = [warmup_then_constant(s, 50, 2.0) for s in range(50)]
    assert lrs[4] == pytest.approx(2.0)
    assert lrs[-1] == 2.0


def test_param_snapshot_detects_drift():
    a, b = make_param([1.0], "a"), make_param([2.0], "b")
    snap = ParamSnapshot.of([a, b])
    b.data = b.data + 1.0
    assert snap.changed_names([a, b]) == ["b"]
