"""Minimal reverse-mode differentiation over numpy arrays.

A ``Tensor`` remembers the op that produced it and a closure mapping the
output gradient to gradients for each parent. ``backward`` walks the recorded
graph in reverse topological order. Ops are coarse (a whole layer norm, a
whole linear map, a whole state-space scan), each with a hand-written
vector-Jacobian product, so the graph of a full model has a few dozen nodes.

Complex intermediates carry gradients as ``dL/dRe + 1j * dL/dIm``; parameters
themselves are always real arrays (complex ones are split into re/im parts).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class GradientError(RuntimeError):
    """A backward pass produced a non-finite gradient or hit a detached node."""


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Backward | None = None
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Backward, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(x) into ``x.grad`` for every x on the graph.

    Intermediate tensors keep their gradients, which is what the saliency maps read.
    """
    if not root.requires_grad:
        raise GradientError(f"'{root.op}' output is detached from every trainable input")
    root.grad = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=root.data.dtype)
    for t in reversed(_topo_order(root)):
        if t.backward_fn is None or t.grad is None:
            continue
        grads = t.backward_fn(t.grad)
        for p, g in zip(t.parents, grads):
            if g is None or not p.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient flowing out of '{t.op}' into '{p.op}'")
            if g.shape != p.data.shape:
                raise GradientError(f"'{t.op}' returned gradient {g.shape} for input {p.data.shape}")
            p.grad = g.copy() if p.grad is None else p.grad + g


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    return node(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return node(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return node(a.data * c, (a,), lambda g: (g * c,), "scale")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def mean_time(a: Tensor) -> Tensor:
    """Average over the time axis of a [..., T, P] tensor."""
    t = a.shape[-2]
    return node(a.data.mean(axis=-2), (a,),
                lambda g: (np.broadcast_to(g[..., None, :] / t, a.shape).copy(),), "mean_time")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., P] @ w[P, H] (+ b[H])."""
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return node(out, parents, back, "linear")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v * v * v)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * d_inner),)

    return node(out, (x,), back, "gelu")


def layernorm_time(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise every variable of x[..., T, P] along T, then gamma[P] * . + beta[P]."""
    v = x.data
    mu = v.mean(axis=-2, keepdims=True)
    xc = v - mu
    var = (xc ** 2).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-2, keepdims=True) - xhat * (gh * xhat).mean(axis=-2, keepdims=True))
        return gx, ggamma, gbeta

    return node(out, (x, gamma, beta), back, "layernorm_time")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    logp = log_softmax(logits.data)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return node(np.asarray(loss), (logits,), back, "cross_entropy")
