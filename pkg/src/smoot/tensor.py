"""Minimal reverse-mode automatic differentiation on top of numpy.

Every op builds a node holding references to its operands and a closure
mapping the upstream gradient to one gradient per operand.  ``backward``
walks the recorded graph in reverse topological order, visiting each node
once, and accumulates (sums) the result into ``.grad`` of every tensor that
requires it.

Convolutions use the deep-learning convention (cross-correlation, no
padding, stride 1).  Internally they run channels-last so the im2col copy
moves contiguous channel runs; the public layout stays NCHW.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_CLAMP = 1e-12
_LOG_FLOOR = math.log(LOG_CLAMP)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the op."""


class NumericError(ArithmeticError):
    """A NaN (or other non-finite value) reached an op that refuses it."""


class Tensor:
    """Dense real array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None) -> None:
        """Back-propagate from this tensor, which must be a scalar.

        Gradients are summed into ``.grad``; call ``zero_grad`` between steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        graph = Graph.from_root(self)
        pending = {id(self): seed}
        for node in reversed(graph.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            # grads are never mutated in place, so aliasing between nodes is safe
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


class Graph:
    """Topologically ordered record of the nodes that produced a root tensor.

    Only nodes that require grad are recorded; every node appears after all
    of its recorded operands.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        # iterative post-order DFS; deep graphs must not hit the recursion limit
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if b.data.ndim == 0:
        return _result(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum())), "add")
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,), "scale")
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the first: [N, ...] -> [N, rest]."""
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    on = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * on,), "relu")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


# ---------------------------------------------------------------------------
# linear algebra / layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias along axis 1 ([N, F] or [N, F, H, W])."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias of shape {b.shape} does not match features of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        return g, (g.sum(axis=axes) if b.requires_grad else None)

    return _result(x.data + b.data.reshape(view), (x, b), backward, "add_bias")


def _im2col(x_nhwc: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = x_nhwc.shape
    win = sliding_window_view(x_nhwc, (kh, kw), axis=(1, 2))  # n, ho, wo, c, kh, kw
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * c)


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation: [N,C,H,W] * [F,C,kh,kw] -> [N,F,H-kh+1,W-kw+1]."""
    if stride != 1:
        raise ValueError("only stride 1 is supported")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if h < kh or wd < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than input {h}x{wd}")
    ho, wo = h - kh + 1, wd - kw + 1
    x_nhwc = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(x_nhwc, kh, kw)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
    out = (cols @ wmat).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = None
        if w.requires_grad:
            gw = (cols.T @ gm).reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            acc = np.zeros((n, h, wd, c), dtype=dcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    acc[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
            gx = acc.transpose(0, 3, 1, 2)
        return gx, gw

    return _result(out, (x, w), backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties go to the first position in row-major window order.
    """
    n, c, h, wd = x.shape
    ho, wo = h // size, wd // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"pool size {size} larger than input {h}x{wd}")
    offsets = [(i, j) for i in range(size) for j in range(size)]

    # channels-last views keep the channel runs contiguous
    def window(a, i, j):
        return a[:, i: i + ho * size: size, j: j + wo * size: size, :]

    xt = x.data.transpose(0, 2, 3, 1)
    best = window(xt, 0, 0).copy()
    for i, j in offsets[1:]:
        np.maximum(best, window(xt, i, j), out=best)

    def backward(g):
        gx = np.zeros((n, h, wd, c), dtype=g.dtype)
        gt = g.transpose(0, 2, 3, 1)
        taken = np.zeros(best.shape, dtype=bool)
        for i, j in offsets:
            hit = window(xt, i, j) == best
            hit &= ~taken
            taken |= hit
            window(gx, i, j)[...] = gt * hit
        return (gx.transpose(0, 3, 1, 2),)

    return _result(best.transpose(0, 3, 1, 2), (x,), backward, "max_pool2d")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# probabilities and losses
# ---------------------------------------------------------------------------

def _check_finite(a: np.ndarray, what: str) -> None:
    if np.isnan(a).any():
        raise NumericError(f"NaN in {what}")


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_np(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (max-shifted)."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects [N, C], got {logits.shape}")
    _check_finite(logits.data, "softmax input")
    s = softmax_np(logits.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (logits,), backward, "softmax")


def log_softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"log_softmax expects [N, C], got {logits.shape}")
    _check_finite(logits.data, "log_softmax input")
    ls = _log_softmax_np(logits.data)

    def backward(g):
        return (g - np.exp(ls) * g.sum(axis=1, keepdims=True),)

    return _result(ls, (logits,), backward, "log_softmax")


def pick(x: Tensor, index) -> Tensor:
    """Select one entry per row: out[n] = x[n, index[n]]."""
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick needs [N, C] input and N indices, got {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, idx] = g
        return (out,)

    return _result(x.data[rows, idx], (x,), backward, "pick")


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for a batch of {n}")
    if (y < 0).any() or (y >= c).any():
        raise IndexError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    return y


def cross_entropy(x: Tensor, labels, from_probs: bool = False) -> Tensor:
    """Mean negative log-likelihood of ``labels``.

    ``x`` holds logits by default (log-space, stable); with ``from_probs`` it
    holds probabilities.  Logs are clamped below at ``log(1e-12)``.
    """
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, C], got {x.shape}")
    n, c = x.shape
    y = _check_labels(labels, n, c)
    rows = np.arange(n)
    _check_finite(x.data, "cross_entropy input")
    if from_probs:
        p = x.data[rows, y]
        live = p > LOG_CLAMP
        logp = np.log(np.where(live, p, LOG_CLAMP))
        loss = -logp.mean()

        def backward(g):
            out = np.zeros(x.shape, dtype=x.dtype)
            out[rows, y] = np.where(live, -1.0 / np.where(live, p, 1.0), 0.0) * (g / n)
            return (out,)

        return _result(np.asarray(loss, dtype=x.dtype), (x,), backward, "cross_entropy")

    ls = _log_softmax_np(x.data)
    picked = ls[rows, y]
    live = picked > _LOG_FLOOR
    loss = -np.where(live, picked, _LOG_FLOOR).mean()

    def backward(g):
        out = np.exp(ls) * live[:, None]
        out[rows, y] -= live
        return (out * (g / n),)

    return _result(np.asarray(loss, dtype=x.dtype), (x,), backward, "cross_entropy")


def kl_div(target, logits: Tensor, target_is_logits: bool = False) -> Tensor:
    """Batch mean of KL(target || softmax(logits)) = sum p * (log p - log q).

    ``target`` is a constant (no gradient flows into it): probabilities, or
    logits when ``target_is_logits``; the latter shares the log-softmax path
    with ``logits`` so equal inputs give exactly 0.  Both logs are clamped
    below at ``log(1e-12)``; the gradient is that of the clamped expression.
    Row values are floored at 0 to drop rounding residue.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"kl_div shapes differ: target {t.shape}, logits {logits.shape}")
    _check_finite(t, "kl_div target")
    _check_finite(logits.data, "kl_div logits")
    n = logits.shape[0]
    logq = _log_softmax_np(logits.data)
    live = logq > _LOG_FLOOR
    if target_is_logits:
        logp = _log_softmax_np(t)
        p = np.exp(logp)
        logp = np.maximum(logp, _LOG_FLOOR)
    else:
        p = t
        logp = np.log(np.maximum(p, LOG_CLAMP))
    per_row = np.maximum((p * (logp - np.where(live, logq, _LOG_FLOOR))).sum(axis=1), 0)

    def backward(g):
        pl = p * live
        grad = np.exp(logq) * pl.sum(axis=1, keepdims=True) - pl
        return (grad * (g / n),)

    return _result(np.asarray(per_row.mean(), dtype=logits.dtype), (logits,), backward, "kl_div")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-4,
                       indices: Optional[Iterable] = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``arr`` (mutated in place).

    Only the listed flat ``indices`` are probed; the rest of the result stays 0.
    """
    out = np.zeros(arr.size, dtype=np.float64)
    flat = arr.reshape(-1)
    probe = range(arr.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(arr.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
              max_probes: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Compare backward() against central differences for every input.

    ``fn(*inputs)`` must return a scalar tensor.  With ``max_probes`` only a
    random subset of coordinates per input is probed.  Returns the max
    relative error over all probed coordinates.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad.copy()
        idx = None
        if max_probes is not None and t.size > max_probes:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(t.size, size=max_probes, replace=False)
        numeric = numerical_gradient(lambda: float(fn(*inputs).data), t.data, h, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
