"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and, when gradients are enabled, remembers the
operation that produced it. backward() walks the graph in reverse
topological order and accumulates gradients into every reachable tensor
with requires_grad set. Only the operations needed by the encoder and its
training losses are provided; everything runs in the dtype of its inputs,
so the same graph code serves float32 training and float64 checking.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateBatchError(ValueError):
    """A reduction was asked to average over zero elements."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / data prep)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _node(data, parents, backward_fn) -> Tensor:
    """Make an output tensor, attaching the graph edge only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor.

    loss must be a scalar. Gradients from shared subexpressions sum;
    tensors with no path to the loss are left untouched.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    # Iterative depth-first topological sort (graphs can be ~1k nodes deep).
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def linear(x: Tensor, w: Tensor, b=None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# -- shape ops ------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    in_shape = x.data.shape
    out_data = x.data.reshape(shape)

    def backward_fn(g):
        _accumulate(x, g.reshape(in_shape))

    return _node(out_data, (x,), backward_fn)


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = _as_tensor(x)
    if axes is None:
        axes = list(range(x.data.ndim - 2)) + [x.data.ndim - 1, x.data.ndim - 2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def backward_fn(g):
        _accumulate(x, np.transpose(g, inverse))

    return _node(out_data, (x,), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    return _node(out_data, tuple(tensors), backward_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[...] = table[ids[...]]; scatter-add on the way back."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding ids must be integers, got dtype {ids.dtype}")
    out_data = table.data[ids]

    def backward_fn(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            _accumulate(table, gt)

    return _node(out_data, (table,), backward_fn)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by index."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {x.data.shape}")
    idx = np.asarray(idx)
    out_data = x.data[idx]

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accumulate(x, gx)

    return _node(out_data, (x,), backward_fn)


# -- nonlinearities -------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0)

    def backward_fn(g):
        _accumulate(x, g * (x.data > 0))

    return _node(out_data, (x,), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    x_sq = xd * xd
    t = np.tanh(_GELU_C * (xd + 0.044715 * (xd * x_sq)))
    out_data = 0.5 * xd * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 0.134145 * x_sq)
        dydx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner
        _accumulate(x, g * dydx)

    return _node(out_data, (x,), backward_fn)


def dropout(x: Tensor, p: float, stream) -> Tensor:
    """Inverted dropout; call only on the training path, with a named stream."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    x = _as_tensor(x)
    keep = (stream.uniform(x.data.shape, dtype=np.float32) >= p).astype(x.data.dtype)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    out_data = x.data * keep * scale

    def backward_fn(g):
        _accumulate(x, g * keep * scale)

    return _node(out_data, (x,), backward_fn)


# -- normalization / attention pieces -------------------------------------

LN_EPS = 1e-5


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _node(out_data, (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = gamma.data * xhat + beta.data

    def backward_fn(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            # d/dx of (x - mu) * inv with mu, var both functions of x
            term = gx - gx.mean(axis=-1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, term * inv)

    return _node(out_data, (x, gamma, beta), backward_fn)


# -- reductions / losses --------------------------------------------------


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.sum()

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _node(out_data, (x,), backward_fn)


def tmean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.size == 0:
        raise DegenerateBatchError("mean over zero elements")
    n = x.data.size
    out_data = x.data.mean()

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g / n, x.data.shape))

    return _node(out_data, (x,), backward_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore=None) -> Tensor:
    """Mean negative log-likelihood over rows not flagged in `ignore`.

    logits: [N, V]; targets: [N] integer class ids; ignore: optional [N]
    bool, True meaning the row contributes nothing to loss or gradient.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {logits.data.shape}")
    n, v = logits.data.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"target id out of range for {v} classes")
    if ignore is None:
        used = np.ones(n, dtype=bool)
    else:
        used = ~np.asarray(ignore, dtype=bool)
    n_used = int(used.sum())
    if n_used == 0:
        raise DegenerateBatchError("cross_entropy: every row is ignored")

    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1)) + m[:, 0]
    nll = lse - logits.data[np.arange(n), targets]
    out_data = np.asarray(nll[used].mean(), dtype=logits.data.dtype)

    def backward_fn(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[np.arange(n), targets] -= 1.0
        probs *= (used / n_used)[:, None]
        _accumulate(logits, probs * g)

    return _node(out_data, (logits,), backward_fn)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable form)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=logits.data.dtype)
    if labels.shape != logits.data.shape:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.data.shape}")
    if logits.data.size == 0:
        raise DegenerateBatchError("bce_with_logits on an empty batch")
    x = logits.data
    per = np.maximum(x, 0) - x * labels + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray(per.mean(), dtype=x.dtype)

    def backward_fn(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        _accumulate(logits, (sig - labels) * (g / x.size))

    return _node(out_data, (logits,), backward_fn)
