"""Network building blocks: parameter store, dense maps, multi-head attention
with optional positional-score fusion, instance-normed encoder layers, and the
cyclic positional encoding."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from .autodiff import (Tensor, add, concat, instance_norm, matmul, relu,
                       reshape, softmax, stack_last, swapaxes, tanh)

NEG_INF = -1e30


class ParamStore:
    """Named learnable tensors; creation order is deterministic."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def new(self, name: str, shape: tuple, rng: np.random.Generator,
            fan_in: int | None = None, zero: bool = False) -> Tensor:
        if name in self.params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        if zero:
            data = np.zeros(shape)
        else:
            if fan_in is None:
                fan_in = shape[0]
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            data = rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def constant(self, name: str, value: float, shape: tuple) -> Tensor:
        if name in self.params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        t = Tensor(np.full(shape, value), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def items(self):
        return self.params.items()

    def __getitem__(self, name):
        return self.params[name]


class Dense:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng, bias: bool = True):
        self.w = store.new(f"{name}.w", (d_in, d_out), rng, fan_in=d_in)
        self.b = store.new(f"{name}.b", (d_out,), rng, fan_in=d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return add(y, self.b) if self.b is not None else y


class ScoreFusion:
    """Per-entry two-input MLP reducing stacked attention scores to one."""

    def __init__(self, store: ParamStore, name: str, rng, hidden: int = 8):
        self.w1 = store.new(f"{name}.w1", (2, hidden), rng, fan_in=2)
        self.b1 = store.new(f"{name}.b1", (hidden,), rng, fan_in=2)
        self.w2 = store.new(f"{name}.w2", (hidden, 1), rng, fan_in=hidden)
        self.b2 = store.new(f"{name}.b2", (1,), rng, fan_in=hidden)

    def __call__(self, node_scores: Tensor, pos_scores: Tensor) -> Tensor:
        if node_scores.shape != pos_scores.shape:
            raise ShapeError(
                f"score shapes differ: {node_scores.shape} vs {pos_scores.shape}")
        pair = stack_last([node_scores, pos_scores])
        hid = relu(add(matmul(pair, self.w1), self.b1))
        out = add(matmul(hid, self.w2), self.b2)
        return reshape(out, node_scores.shape)


def syn_att_scores(node_scores: Tensor, pos_scores: Tensor,
                   fusion: ScoreFusion) -> Tensor:
    """Fuse node-content and positional attention scores entry by entry."""
    return fusion(node_scores, pos_scores)


class MultiHeadAttention:
    def __init__(self, store: ParamStore, name: str, d: int, heads: int, rng):
        if d % heads:
            raise ShapeError(f"head count {heads} must divide d={d}")
        self.d = d
        self.heads = heads
        self.dh = d // heads
        self.wq = store.new(f"{name}.wq", (d, d), rng)
        self.wk = store.new(f"{name}.wk", (d, d), rng)
        self.wv = store.new(f"{name}.wv", (d, d), rng)
        self.wo = store.new(f"{name}.wo", (d, d), rng)

    def _split(self, x: Tensor, B: int, N: int) -> Tensor:
        return swapaxes(reshape(x, (B, N, self.heads, self.dh)), 1, 2)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                 additive_mask: np.ndarray | None = None,
                 pos_scores: Tensor | None = None,
                 fusion: ScoreFusion | None = None) -> Tensor:
        B, N, d = q_in.shape
        M = k_in.shape[1]
        if d != self.d or k_in.shape[2] != self.d or v_in.shape[2] != self.d:
            raise ShapeError(f"attention expects width {self.d}")
        q = self._split(matmul(q_in, self.wq), B, N)
        k = self._split(matmul(k_in, self.wk), B, M)
        v = self._split(matmul(v_in, self.wv), B, M)
        scores = matmul(q, swapaxes(k, -1, -2))        # (B, H, N, M)
        if fusion is not None:
            if pos_scores is None:
                raise ShapeError("fused attention needs positional scores")
            scores = fusion(scores, pos_scores)
        scores = scores / math.sqrt(self.dh)
        if additive_mask is not None:
            scores = add(scores, additive_mask)
        attn = softmax(scores, axis=-1)
        mixed = matmul(attn, v)                        # (B, H, N, dh)
        merged = reshape(swapaxes(mixed, 1, 2), (B, N, self.d))
        return matmul(merged, self.wo)


class EncoderLayer:
    """Attention + instance-norm + feed-forward block with residuals."""

    def __init__(self, store: ParamStore, name: str, d: int, d_ff: int,
                 heads: int, rng):
        self.mha = MultiHeadAttention(store, f"{name}.mha", d, heads, rng)
        self.g1 = store.constant(f"{name}.in1.gamma", 1.0, (d,))
        self.b1 = store.constant(f"{name}.in1.beta", 0.0, (d,))
        self.w1 = store.new(f"{name}.ff.w1", (d, d_ff), rng)
        self.w2 = store.new(f"{name}.ff.w2", (d_ff, d), rng)
        self.g2 = store.constant(f"{name}.in2.gamma", 1.0, (d,))
        self.b2 = store.constant(f"{name}.in2.beta", 0.0, (d,))

    def __call__(self, h: Tensor, pos_scores: Tensor | None = None,
                 fusion: ScoreFusion | None = None) -> Tensor:
        attn = self.mha(h, h, h, pos_scores=pos_scores, fusion=fusion)
        h1 = instance_norm(add(attn, h), self.g1, self.b1)
        ff = matmul(relu(matmul(h1, self.w1)), self.w2)
        return instance_norm(add(ff, h1), self.g2, self.b2)


def cpe(position: int, length: int, d: int) -> np.ndarray:
    """Cyclic positional encoding of one position on a cycle of ``length``.

    Waveform: channel pair k holds sin/cos at integer frequency k+1 over the
    cycle, so consecutive positions are equidistant (including the wrap) and
    the base frequency keeps all positions distinct.
    """
    if not 0 <= position < length:
        raise IndexError(f"position {position} outside [0, {length})")
    return cpe_table(length, d)[position]


def cpe_table(length: int, d: int) -> np.ndarray:
    if d % 2:
        raise ShapeError("cyclic positional encoding needs an even width")
    pos = np.arange(length)[:, None]
    freqs = np.arange(1, d // 2 + 1)[None, :]
    angle = 2.0 * np.pi * pos * freqs / length
    out = np.empty((length, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def additive_mask_from_bool(mask: np.ndarray) -> np.ndarray:
    """True entries become a large negative logit offset."""
    return np.where(mask, NEG_INF, 0.0)
