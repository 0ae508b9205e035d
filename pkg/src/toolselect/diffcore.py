"""Minimal dense reverse-mode differentiation over float64 numpy arrays.

Tensors wrap a numpy array plus a backward closure; calling ``backward``
on a scalar root walks the tape in reverse topological order. There is no
broadcasting beyond row-vector bias addition -- every other shape must
match exactly, which keeps shape bugs loud.
"""

import numpy as np

from . import kernels
from .errors import (
    EmptyReferenceSetError,
    NoValidCandidateError,
    ShapeMismatchError,
)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(()))

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


def constant(data):
    return Tensor(data, requires_grad=False)


def add(a, b):
    """Elementwise add; also accepts a row-vector bias for a matrix ``a``."""
    if a.data.shape == b.data.shape:
        def back(g):
            if a.requires_grad:
                a.accumulate(g)
            if b.requires_grad:
                b.accumulate(g)
        return _make(a.data + b.data, (a, b), back)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def back(g):
            if a.requires_grad:
                a.accumulate(g)
            if b.requires_grad:
                b.accumulate(g.sum(axis=0))
        return _make(a.data + b.data[None, :], (a, b), back)
    raise ShapeMismatchError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def back(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)
    return _make(a.data * b.data, (a, b), back)


def scale(a, c):
    c = float(c)

    def back(g):
        if a.requires_grad:
            a.accumulate(g * c)
    return _make(a.data * c, (a,), back)


def affine(a, w, b):
    """Elementwise w*a + b with python scalars w, b."""
    w = float(w)
    b = float(b)

    def back(g):
        if a.requires_grad:
            a.accumulate(g * w)
    return _make(a.data * w + b, (a,), back)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(
            f"matmul: expected 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions disagree: {a.data.shape} vs {b.data.shape}")

    def back(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)
    return _make(a.data @ b.data, (a, b), back)


def concat_cols(parts):
    """Column-wise concatenation of 2-D tensors with equal row counts."""
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeMismatchError("concat_cols: operands must be 2-D with equal row counts")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[:, lo:hi])
    return _make(np.concatenate([p.data for p in parts], axis=1), parts, back)


def stack_rows(parts):
    """Stack 1-row tensors (or concatenate 2-D blocks) along axis 0."""
    counts = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + counts)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[lo:hi])
    return _make(np.concatenate([p.data for p in parts], axis=0), parts, back)


def take_rows(a, idx):
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a.accumulate(acc)
    return _make(a.data[idx], (a,), back)


def scatter_1d(a, idx, size):
    """Place a 1-D tensor's entries at positions ``idx`` of a zero vector."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 1 or idx.shape != a.data.shape:
        raise ShapeMismatchError(
            f"scatter_1d: values {a.data.shape} vs indices {idx.shape}")
    data = np.zeros(size)
    data[idx] = a.data

    def back(g):
        if a.requires_grad:
            a.accumulate(g[idx])
    return _make(data, (a,), back)


def reshape(a, shape):
    def back(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), back)


def sum_all(a):
    def back(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, float(g)))
    return _make(a.data.sum(), (a,), back)


def mean_all(a):
    n = a.data.size

    def back(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, float(g) / n))
    return _make(a.data.mean(), (a,), back)


def wsum(a, w):
    """Weighted sum against a constant numpy array of identical shape."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != a.data.shape:
        raise ShapeMismatchError(f"wsum: weight shape {w.shape} != tensor shape {a.data.shape}")

    def back(g):
        if a.requires_grad:
            a.accumulate(float(g) * w)
    return _make((a.data * w).sum(), (a,), back)


def exp(a):
    y = np.exp(a.data)

    def back(g):
        if a.requires_grad:
            a.accumulate(g * y)
    return _make(y, (a,), back)


def log_clamped(a, eps=1e-12):
    clamped = np.maximum(a.data, eps)

    def back(g):
        if a.requires_grad:
            grad = np.where(a.data > eps, g / clamped, 0.0)
            a.accumulate(grad)
    return _make(np.log(clamped), (a,), back)


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        if a.requires_grad:
            a.accumulate(g * y * (1.0 - y))
    return _make(y, (a,), back)


def gelu(a):
    """Exact-erf GELU: 0.5*x*(1+erf(x/sqrt(2)))."""
    def back(g):
        if a.requires_grad:
            a.accumulate(kernels.gelu_bwd(a.data, g))
    return _make(kernels.gelu_fwd(a.data), (a,), back)


def softmax_rows(a):
    y = kernels.softmax_rows(a.data)

    def back(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            a.accumulate(y * (g - dot))
    return _make(y, (a,), back)


def masked_softmax(scores, mask):
    """Softmax over the unmasked entries of a 1-D score vector.

    Masked entries are exactly zero in the output and receive exactly zero
    gradient. Raises NoValidCandidateError when every entry is masked.
    """
    mask = np.asarray(mask, dtype=bool)
    if scores.data.ndim != 1 or mask.shape != scores.data.shape:
        raise ShapeMismatchError(
            f"masked_softmax: scores {scores.data.shape} vs mask {mask.shape}")
    if not mask.any():
        raise NoValidCandidateError("masked_softmax: all candidates masked")
    y = kernels.masked_softmax(scores.data, mask)

    def back(g):
        if scores.requires_grad:
            dot = float((g * y).sum())
            scores.accumulate(y * (g - dot))
    return _make(y, (scores,), back)


def attend(query_rows, keys, values, dk_scale=None):
    """Single-head scaled dot-product attention; no output projection.

    out[i] = softmax(query_rows[i] . keys^T / sqrt(d_k)) @ values
    """
    if keys.data.shape[0] == 0:
        raise EmptyReferenceSetError("attend: no keys/values to attend over")
    if keys.data.shape[0] != values.data.shape[0]:
        raise ShapeMismatchError(
            f"attend: key rows {keys.data.shape[0]} != value rows {values.data.shape[0]}")
    if query_rows.data.shape[1] != keys.data.shape[1]:
        raise ShapeMismatchError(
            f"attend: query dim {query_rows.data.shape[1]} != key dim {keys.data.shape[1]}")
    dk = keys.data.shape[1] if dk_scale is None else dk_scale
    logits = scale(matmul(query_rows, transpose(keys)), 1.0 / np.sqrt(dk))
    weights = softmax_rows(logits)
    return matmul(weights, values)


def transpose(a):
    def back(g):
        if a.requires_grad:
            a.accumulate(g.T)
    return _make(a.data.T, (a,), back)


def dropout(a, p, rng):
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)

    def back(g):
        if a.requires_grad:
            a.accumulate(g * keep)
    return _make(a.data * keep, (a,), back)


def backward(root):
    """Populate gradients for every requires_grad tensor reachable from root."""
    if root.data.shape != ():
        raise ShapeMismatchError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not np.isfinite(root.data):
        raise ValueError("backward: root is not finite")
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params):
    for p in params:
        p.grad = None


def grad_check(f, params, h=1e-5):
    """Worst relative error between analytic and central-difference gradients.

    ``f`` maps the parameter list to a scalar Tensor and must be
    deterministic (re-evaluated many times with perturbed parameters).
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    zero_grads(params)
    out = f(params)
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params).item()
            flat[i] = orig - h
            fm = f(params).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - num) / max(abs(aflat[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
