"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
backward rule. :func:`backward` walks the recorded graph in reverse
topological order and accumulates ``.grad`` on leaf tensors that have
``requires_grad=True``. Intermediate gradients live only for the duration
of one traversal, so the same graph may be differentiated more than once.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """n-dimensional float64 array with an optional gradient slot.

    ``data`` is kept as-is when it already is a float64 ndarray, so a tensor
    built from a numpy view aliases the storage it was sliced from.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        _op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(
    data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str
) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)


class Tape:
    """Recorded operations reachable from a root, in topological order.

    Inputs of a node always precede it in ``nodes``.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is None:
        tape = Tape.from_root(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# elementwise -----------------------------------------------------------------


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> int:
    """0 = exact match, 1 = b broadcast over a's batch dim, 2 = a over b's."""
    if a.shape == b.shape:
        return 0
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return 1
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return 2
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, kind: int, side: int) -> np.ndarray:
    # side 0 = a, side 1 = b
    if (kind == 1 and side == 1) or (kind == 2 and side == 0):
        return g.sum(axis=0)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "add")

    def bw(g):
        return _unbroadcast(g, kind, 0), _unbroadcast(g, kind, 1)

    return _result(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, kind, 0), _unbroadcast(g * a.data, kind, 1)

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax along the last axis, max-shifted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), bw, "log_softmax")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),), "reshape")


# reductions ------------------------------------------------------------------


def _norm_axis(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not axes:
        raise ValueError("empty axis tuple")
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axis(axis, a.ndim)
    if axes is not None and any(a.shape[ax] == 0 for ax in axes):
        raise ValueError("cannot reduce over an empty axis")
    in_shape = a.shape

    def bw(g):
        if axes is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axes), in_shape).copy(),)

    return _result(np.sum(a.data, axis=axes), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ValueError("cannot reduce over an empty axis")
    return scale(sum(a, axis=axes), 1.0 / count)


def max_index(a: Union[Tensor, np.ndarray], axis: int = -1) -> np.ndarray:
    """Argmax along ``axis``; ties resolve to the lowest index."""
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    _norm_axis(axis, data.ndim)
    if data.shape[axis] == 0:
        raise ValueError("cannot take max_index over an empty axis")
    return np.argmax(data, axis=axis)


# linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of an N×C×H×W batch, computed via im2col."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_w, kh, kw = weight.shape
    if c_w != c_in:
        raise ShapeError(f"conv2d: input {x.shape} has {c_in} channels, weight {weight.shape} expects {c_w}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
    k = kh
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo} for input {x.shape}, kernel {k}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((n, c_in, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c_in * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c_in, k, k).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), parents, bw, "conv2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean_: np.ndarray,
    var: np.ndarray,
    eps: float,
    batch_stats: bool,
) -> Tensor:
    """Per-channel normalization of an N×C×H×W tensor.

    With ``batch_stats`` the supplied ``mean_``/``var`` must be the batch
    statistics of ``x`` and the backward rule accounts for their dependence
    on ``x``; otherwise they are treated as constants.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected N×C×H×W input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params {gamma.shape}/{beta.shape} do not match {c} channels")
    bshape = (1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var.reshape(bshape) + eps)
    xhat = (x.data - mean_.reshape(bshape)) * inv_std
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    m = x.size // c

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(bshape)
        if batch_stats:
            gx = (
                inv_std
                / m
                * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bw, "batch_norm")
