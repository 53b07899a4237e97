"""Reverse-mode automatic differentiation over batched numpy arrays.

The operator set is limited to what the network stack needs: matmul,
elementwise arithmetic, tanh/relu/exp/log, fused softmax and log-softmax,
fused instance normalization, reductions, concat, reshape/transpose, and
gather/scatter indexing.  Gradients accumulate in float64.  A module-level
switch disables graph recording for inference.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None,
                 name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self.grad = None
        self.parents = parents if self.requires_grad else ()
        self.backward_fn = backward_fn if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, seed=None):
        """Accumulate gradients of this tensor into every reachable leaf."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed)
        for node in reversed(topo):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
                node.grad = None  # free intermediates; leaves keep theirs

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor division is restricted to scalars")
        return mul(self, 1.0 / other)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents, backward_fn) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(p for p in parents
                                                          if p.requires_grad),
                  backward_fn=backward_fn)


# -- arithmetic -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        x.accumulate(g * (x.data > 0.0))

    return _make(out_data, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.tanh(x.data)

    def backward(g):
        x.accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def backward(g):
        x.accumulate(g * out_data)

    return _make(out_data, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.log(x.data)

    def backward(g):
        x.accumulate(g / x.data)

    return _make(out_data, (x,), backward)


# -- reductions -------------------------------------------------------------------


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x.accumulate(np.broadcast_to(g, x.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(gg, x.shape).copy())

    return _make(out_data, (x,), backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- fused softmax family -------------------------------------------------------------


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x.accumulate(out_data * (g - dot))

    return _make(out_data, (x,), backward)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        p = np.exp(out_data)
        x.accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), backward)


def entropy_from_log_probs(logp, axis=-1) -> Tensor:
    """Shannon entropy of softmax distributions given log-probabilities.

    Fully masked entries carry log-probabilities near -inf whose exp
    underflows to exactly zero, contributing nothing.
    """
    logp = as_tensor(logp)
    p = np.exp(logp.data)
    out_data = -(p * np.where(p > 0.0, logp.data, 0.0)).sum(axis=axis)

    def backward(g):
        gg = np.expand_dims(g, axis)
        contrib = np.where(p > 0.0, logp.data, 0.0)
        # dH/dlogp_i = -p_i (logp_i + 1 - sum_j p_j logp_j - ...) via
        # chain rule through p = exp(logp) with logp free coordinates:
        logp.accumulate(gg * (-(p * (contrib + 1.0))))

    return _make(out_data, (logp,), backward)


# -- normalization ---------------------------------------------------------------------


def instance_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalize over axis 1 (nodes) per batch row and feature channel."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3:
        raise ShapeError(f"instance_norm expects (batch, nodes, d), got {x.shape}")
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = (x.data - mean) * inv
    out_data = norm * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * norm).sum(axis=(0, 1)))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gn = g * gamma.data
            n = x.shape[1]
            dvar = (gn * (x.data - mean)).sum(axis=1, keepdims=True) * (-0.5) * inv**3
            dmean = (-gn * inv).sum(axis=1, keepdims=True) + dvar * (
                -2.0 * (x.data - mean).mean(axis=1, keepdims=True))
            x.accumulate(gn * inv + dvar * 2.0 * (x.data - mean) / n + dmean / n)

    return _make(out_data, (x, gamma, beta), backward)


# -- shape & indexing --------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        x.accumulate(g.reshape(x.shape))

    return _make(out_data, (x,), backward)


def swapaxes(x, a, b) -> Tensor:
    x = as_tensor(x)
    out_data = np.swapaxes(x.data, a, b)

    def backward(g):
        x.accumulate(np.swapaxes(g, a, b))

    return _make(out_data, (x,), backward)


def concat(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p.accumulate(piece)

    return _make(out_data, tuple(parts), backward)


def gather_rows(x, idx) -> Tensor:
    """Pick one row per batch entry: (B, N, d), (B,) -> (B, d)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out_data = x.data[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        x.accumulate(gx)

    return _make(out_data, (x,), backward)


def gather_scalars(x, idx) -> Tensor:
    """Pick one scalar per batch entry: (B, N), (B,) -> (B,)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out_data = x.data[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        x.accumulate(gx)

    return _make(out_data, (x,), backward)


def take(x, idx, axis=0) -> Tensor:
    """Index an axis with an integer array (numpy take semantics)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        expand = [slice(None)] * x.ndim
        expand[axis] = idx
        np.add.at(gx, tuple(expand), g)
        x.accumulate(gx)

    return _make(out_data, (x,), backward)


def stack_last(parts) -> Tensor:
    """Stack equal-shape tensors along a new final axis."""
    parts = [as_tensor(p) for p in parts]
    out_data = np.stack([p.data for p in parts], axis=-1)

    def backward(g):
        for k, p in enumerate(parts):
            if p.requires_grad:
                p.accumulate(g[..., k])

    return _make(out_data, tuple(parts), backward)
