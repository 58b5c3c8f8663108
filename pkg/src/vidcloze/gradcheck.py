"""Finite-difference validation of the backward pass.

The check replays the caller's forward closure in float64, takes analytic
gradients from backward(), and probes random parameter scalars with a
central difference. Comparing the two routes catches sign, transpose, and
accumulation bugs that unit tests of single ops miss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward
from .optim import Parameter
from .rng import RngStream


class NondeterministicForwardError(RuntimeError):
    """The loss closure returned different values on identical replays."""


@dataclass
class Probe:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    n_probes: int
    probes: list = field(default_factory=list)

    def worst(self) -> Probe:
        return max(self.probes, key=lambda p: p.rel_error)


def _rel_error(a: float, n: float) -> float:
    denom = max(abs(a) + abs(n), 1e-8)
    return abs(a - n) / denom


def grad_check(loss_fn, params: list[Parameter], n_probes: int = 100,
               tolerance: float = 1e-4, step: float = 3e-4,
               seed: int = 0) -> GradCheckReport:
    """Compare backward() against central differences on random scalars.

    loss_fn: nullary closure returning a scalar loss Tensor; it must be
    deterministic (run dropout in eval mode). params: the parameters to
    probe; the frozen flag is ignored here since frozen tensors still
    carry gradients. Parameters are temporarily promoted to float64 and
    restored bit-exactly afterwards.
    """
    if not params:
        raise ValueError("grad_check needs at least one parameter to probe")
    saved = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)

        loss_a = loss_fn()
        loss_b = loss_fn()
        if loss_a.data.tobytes() != loss_b.data.tobytes():
            raise NondeterministicForwardError(
                "loss closure is not replay-stable; disable dropout and pin RNG streams")

        for p in params:
            p.clear_grad()
        backward(loss_a)
        analytic = []
        for p in params:
            g = p.grad
            analytic.append(np.zeros_like(p.data) if g is None else g.astype(np.float64))

        sizes = np.array([p.data.size for p in params])
        total = int(sizes.sum())
        stream = RngStream(seed, "gradcheck/probes")
        flat_picks = stream.integers(0, total, size=n_probes)

        probes = []
        bounds = np.cumsum(sizes)
        for flat in flat_picks:
            pi = int(np.searchsorted(bounds, flat, side="right"))
            local = int(flat - (bounds[pi - 1] if pi else 0))
            p = params[pi]
            flat_view = p.data.reshape(-1)
            orig = flat_view[local]
            flat_view[local] = orig + step
            up = float(loss_fn().data)
            flat_view[local] = orig - step
            down = float(loss_fn().data)
            flat_view[local] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[pi].reshape(-1)[local])
            probes.append(Probe(p.name, local, a, numeric, _rel_error(a, numeric)))

        max_err = max(pr.rel_error for pr in probes)
        return GradCheckReport(max_rel_error=max_err, tolerance=tolerance,
                               passed=max_err < tolerance, n_probes=len(probes),
                               probes=probes)
    finally:
        for p, buf in zip(params, saved):
            p.data = buf
            p.clear_grad()
