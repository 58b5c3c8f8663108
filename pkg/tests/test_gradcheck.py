"""The checker itself must both pass correct gradients and fail wrong ones."""

import numpy as np
import pytest

import vidcloze.autodiff as ad
from vidcloze.autodiff import Tensor, gelu, linear, softmax_rows, tmean, tsum
from vidcloze.gradcheck import (GradCheckReport, NondeterministicForwardError,
                                grad_check)
from vidcloze.optim import Parameter


def test_passes_on_small_mlp():
    rng = np.random.default_rng(0)
    w1 = Parameter(rng.standard_normal((4, 8)).astype(np.float32) * 0.5, "w1")
    b1 = Parameter(np.zeros(8, dtype=np.float32), "b1")
    w2 = Parameter(rng.standard_normal((8, 3)).astype(np.float32) * 0.5, "w2")
    x = np.asarray(rng.standard_normal((5, 4)), dtype=np.float32)

    def loss_fn():
        h = gelu(linear(Tensor(x.astype(w1.data.dtype)), w1.tensor, b1.tensor))
        return tmean(softmax_rows(h @ w2.tensor))

    report = grad_check(loss_fn, [w1, b1, w2], n_probes=60, tolerance=1e-4)
    assert report.passed, report.worst()
    assert report.n_probes == 60


def test_restores_float32_bits_exactly():
    w = Parameter(np.array([0.1, 0.2, 0.3], dtype=np.float32), "w")
    before = w.data.tobytes()
    grad_check(lambda: tsum(w.tensor * w.tensor), [w], n_probes=5, tolerance=1e-4)
    assert w.data.dtype == np.float32
    assert w.data.tobytes() == before


def test_detects_a_wrong_backward_rule():
    w = Parameter(np.array([1.0, 2.0, -1.5], dtype=np.float32), "w")

    def bad_square(x):
        out = x.data ** 2

        def backward_fn(g):
            ad._accumulate(x, g * x.data)  # deliberately missing the factor 2

        return ad._node(out, (x,), backward_fn)

    report = grad_check(lambda: tsum(bad_square(w.tensor)), [w],
                        n_probes=10, tolerance=1e-4)
    assert not report.passed
    assert report.max_rel_error > 0.1


def test_rejects_nondeterministic_closure():
    w = Parameter(np.array([1.0], dtype=np.float32), "w")
    counter = {"n": 0}

    def loss_fn():
        counter["n"] += 1
        return tsum(w.tensor * float(counter["n"]))

    with pytest.raises(NondeterministicForwardError):
        grad_check(loss_fn, [w], n_probes=3, tolerance=1e-4)


def test_zero_gradient_parameters_probe_clean():
    used = Parameter(np.array([2.0], dtype=np.float32), "used")
    unused = Parameter(np.array([3.0], dtype=np.float32), "unused")
    report = grad_check(lambda: tsum(used.tensor * used.tensor),
                        [used, unused], n_probes=40, tolerance=1e-4)
    assert report.passed
    assert isinstance(report, GradCheckReport)


def test_report_worst_points_at_largest_error():
    w = Parameter(np.array([1.0, 2.0], dtype=np.float32), "w")
    report = grad_check(lambda: tsum(w.tensor * w.tensor), [w],
                        n_probes=8, tolerance=1e-4)
    assert report.worst().rel_error == report.max_rel_error
