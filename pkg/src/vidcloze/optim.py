"""Named parameters and a freeze-aware Adam.

Freezing is enforced here and only here: gradients still flow through
frozen tensors during backward (modules grafted below them need the chain),
but adam_step never touches a frozen parameter's bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class MissingGradError(RuntimeError):
    """A trainable parameter reached adam_step without a gradient."""


@dataclass
class AdamConfig:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"Adam betas must lie in [0, 1): got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0.0:
            raise ValueError(f"Adam epsilon must be positive: got {self.epsilon}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight decay must be non-negative: got {self.weight_decay}")


class Parameter:
    """A leaf tensor with a stable name, a frozen flag, and optimizer slots."""

    def __init__(self, data: np.ndarray, name: str, frozen: bool = False):
        self.tensor = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.name = name
        self.frozen = bool(frozen)
        self.optimizer_state: dict = {}

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value)

    @property
    def grad(self):
        return self.tensor.grad

    def clear_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        tag = " frozen" if self.frozen else ""
        return f"Parameter({self.name}, shape={self.data.shape}{tag})"


def adam_step(params: list[Parameter], config: AdamConfig, lr: float | None = None):
    """One Adam update with bias correction and decoupled weight decay.

    Frozen parameters are skipped outright (bits unchanged, no state
    advanced). A missing gradient on a trainable parameter is an error so
    silent no-ops cannot hide a detached subgraph; gradients are cleared
    on every parameter at exit either way.
    """
    step_lr = config.learning_rate if lr is None else lr
    for p in params:
        if p.frozen:
            p.clear_grad()
            continue
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name!r} is trainable but has no gradient")
        state = p.optimizer_state
        if not state:
            state["step"] = 0
            state["m"] = np.zeros_like(p.data)
            state["v"] = np.zeros_like(p.data)
        state["step"] += 1
        t = state["step"]
        g = p.grad.astype(p.data.dtype, copy=False)
        state["m"] = config.beta1 * state["m"] + (1.0 - config.beta1) * g
        state["v"] = config.beta2 * state["v"] + (1.0 - config.beta2) * (g * g)
        m_hat = state["m"] / (1.0 - config.beta1 ** t)
        v_hat = state["v"] / (1.0 - config.beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + config.epsilon)
        if config.weight_decay:
            update = update + config.weight_decay * p.data
        p.data = p.data - np.asarray(step_lr, dtype=p.data.dtype) * update.astype(p.data.dtype)
        p.clear_grad()


def warmup_then_linear_decay(step: int, total_steps: int, peak_lr: float,
                             warmup_frac: float = 0.1, floor: float = 0.0) -> float:
    """LR at `step` (0-based): linear warmup to peak, then linear decay."""
    warmup = max(1, int(round(total_steps * warmup_frac)))
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    if total_steps <= warmup:
        return peak_lr
    frac = (step - warmup) / max(1, total_steps - warmup)
    return floor + (peak_lr - floor) * max(0.0, 1.0 - frac)


def warmup_then_constant(step: int, total_steps: int, peak_lr: float,
                         warmup_frac: float = 0.1) -> float:
    warmup = max(1, int(round(total_steps * warmup_frac)))
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    return peak_lr


@dataclass
class ParamSnapshot:
    """Byte-level snapshot of a set of parameters, for drift checks."""

    blobs: dict = field(default_factory=dict)

    @classmethod
    def of(cls, params: list[Parameter]) -> "ParamSnapshot":
        return cls(blobs={p.name: p.data.tobytes() for p in params})

    def changed_names(self, params: list[Parameter]) -> list[str]:
        return [p.name for p in params
                if p.name in self.blobs and p.data.tobytes() != self.blobs[p.name]]
