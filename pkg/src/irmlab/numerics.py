"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every op returns a new :class:`Tensor`. When at least one input has
``requires_grad`` set, the result remembers its parents and a closure that
maps the output gradient to input gradients. :func:`backward` walks that
record in reverse topological order.

Shapes are explicit. The only implicit broadcast is a bias vector added
over the rows of a matrix (:func:`add_bias`) and the 2-D weight operand of
:func:`matmul` / :func:`linear` applied over leading batch axes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, detached loss, reuse)."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "leaf"
        out._consumed = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes.

    ``b`` is either 2-D (shared across the leading axes of ``a``) or has the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    shared_b = B.ndim == 2

    def backward(g):
        ga = g @ _swap(B) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif shared_b:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _swap(A) @ g
        return ga, gb

    return _result(A @ B, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` with ``w`` stored as (out_features, in_features)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    X, W = x.data, w.data

    def backward(g):
        gx = g @ W if x.requires_grad else None
        gw = g.reshape(-1, g.shape[-1]).T @ X.reshape(-1, X.shape[-1]) if w.requires_grad else None
        return gx, gw

    return _result(X @ W.T, (x, w), backward, "linear")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Take one slice along ``axis`` (that axis is dropped)."""
    axis = axis % x.ndim
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(np.take(x.data, index, axis=axis), (x,), backward, "select")


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for embedding of size {weight.shape[0]}")
    vocab = weight.shape[0]

    def backward(g):
        gw = np.zeros((vocab, g.shape[-1]))
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), backward, "embedding")


# ---------------------------------------------------------------- elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of ``x`` (last axis)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    n = b.shape[0]
    return _result(
        x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias"
    )


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    X = x.data
    mask = X > 0
    return _result(np.where(mask, X, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    X = x.data
    s = _sigmoid(X)
    return _result(X * s, (x,), lambda g: (g * (s + X * s * (1.0 - s)),), "silu")


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(
        np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


# ---------------------------------------------------------------- transformer pieces


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """``gain * x / sqrt(mean(x**2) + eps)`` along the last axis."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"rmsnorm: gain {gain.shape} does not match {x.shape}")
    X, G = x.data, gain.data
    d = X.shape[-1]
    r = 1.0 / np.sqrt(np.mean(X * X, axis=-1, keepdims=True) + eps)
    xhat = X * r

    def backward(g):
        gxhat = g * G
        gx = r * (gxhat - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        return gx, ggain

    return _result(xhat * G, (x, gain), backward, "rmsnorm")


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max.

    ``mask`` (broadcastable boolean, True = keep) zeroes excluded entries;
    every row must keep at least one entry.
    """
    X = x.data
    if mask is not None:
        X = np.where(mask, X, -np.inf)
    z = X - X.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def rope_tables(positions, d_head: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    if d_head % 2:
        raise ValueError(f"rotary embedding needs an even head dimension, got {d_head}")
    pos = np.asarray(positions, dtype=np.float64)
    freqs = theta ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = pos[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def rope_apply(x: Tensor, positions, theta: float) -> Tensor:
    """Rotate consecutive feature pairs of ``x[..., seq, d_head]`` by position."""
    d_head = x.shape[-1]
    cos, sin = rope_tables(positions, d_head, theta)
    if cos.shape[0] != x.shape[-2]:
        raise ShapeError(f"rope: {cos.shape[0]} positions for sequence length {x.shape[-2]}")
    X = x.data
    x0, x1 = X[..., 0::2], X[..., 1::2]
    out = np.empty_like(X)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def backward(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return _result(out, (x,), backward, "rope")


def swiglu_ffn(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor) -> Tensor:
    """``W2 (silu(W1 x) * (W3 x))`` applied row-wise."""
    return linear(mul(silu(linear(x, w1)), linear(x, w3)), w2)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax of ``logits``.

    ``mask`` (same shape as ``targets``, True = counted) drops padding
    positions from the mean.
    """
    V = logits.shape[-1]
    L = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != L.shape[0]:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {L.shape[0]} rows")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target id out of range for vocabulary of size {V}")
    keep = np.ones(t.shape[0], bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is masked")
    z = L - L.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(t.shape[0])
    nll = -logp[rows, t]
    loss = nll[keep].sum() / n
    shape = logits.shape

    def backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        p *= keep[:, None] * (float(g) / n)
        return (p.reshape(shape),)

    return _result(np.array(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- backward


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad.

    Leaf gradients accumulate across calls (zero them between optimizer
    steps); a given loss graph can be differentiated only once.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: nothing upstream requires grad")
    if loss._consumed:
        raise GraphError("backward already ran on this graph")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        node._consumed = True
        if node._backward is not None:
            # drop saved closures so intermediate arrays can be freed
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------- gradient checking


def numerical_grad(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f().item()
        flat[i] = orig - eps
        down = f().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Worst elementwise relative error between autodiff and finite differences."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, max_relative_error(analytic, numerical_grad(f, p, eps)))
    return worst
