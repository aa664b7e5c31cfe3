"""Dense float64 tensors with eager reverse-mode automatic differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a contiguous
float64 numpy array, every differentiable operation records an
:class:`OpNode` with a backward rule, and :func:`backward` replays the
recorded graph in reverse topological order (the :class:`Tape`).

Design constraints honoured throughout:

* float64 only — the gradient checks in the test suite need the headroom;
* define-by-run — graph topology may change between calls (the attack
  loop re-ranks tokens every iteration);
* every operation validates that its output is finite, so NaN/Inf
  surfaces immediately as :class:`NumericError` instead of corrupting a
  later loss;
* non-differentiable ops (``sign``, index selection) never record nodes;
  a path that needs them must go through :func:`detach` explicitly.

No global state: independent graphs may live on different threads.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

Scalarish = Union[int, float, np.floating]


class OpNode:
    """One recorded operation: inputs, output, and a backward rule.

    ``backward(grad_out)`` returns one gradient array (or None) per input.
    """

    __slots__ = ("inputs", "output", "backward", "name")

    def __init__(self, inputs: tuple, output: "Tensor", backward: Callable, name: str):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.name = name

    def __repr__(self) -> str:
        return f"<OpNode {self.name}>"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("Tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[OpNode] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping --------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Value-identical tensor excluded from gradient flow."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    # method forms used all over the encoder

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    def permute(self, axes):
        return permute(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


class Tape:
    """Topologically ordered list of the operations reachable from a root.

    Invariants: every node's inputs appear before the node itself, and the
    backward pass visits each node exactly once in reverse order.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        nodes: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            node = tensor.node
            if node is None or id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                nodes.append(node)
            else:
                stack.append((tensor, True))
                for parent in node.inputs:
                    if parent.node is not None and id(parent.node) not in seen:
                        stack.append((parent, False))
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf feeding ``root``.

    ``root`` must be scalar. Repeated calls accumulate into existing grads.
    """
    if root.data.size != 1:
        raise ContractError(f"backward() root must be scalar, got shape {root.shape}")
    pending: dict = {id(root): np.ones_like(root.data)}
    holders: dict = {id(root): root}
    tape = Tape.trace(root)
    for node in reversed(tape.nodes):
        grad_out = pending.pop(id(node.output), None)
        if grad_out is None:
            continue
        grads_in = node.backward(grad_out)
        for parent, g in zip(node.inputs, grads_in):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + g
            else:
                pending[key] = g
                holders[key] = parent
    # after the reverse walk only graph leaves remain pending
    for key, g in pending.items():
        _deposit(holders[key], g)


def _deposit(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    grad = np.asarray(grad, dtype=np.float64).reshape(tensor.data.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


# ---------------------------------------------------------------------------
# op construction helpers
# ---------------------------------------------------------------------------


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _check_finite(data: np.ndarray, name: str) -> None:
    # a finite sum proves all entries finite; a non-finite sum may just be
    # overflow, so confirm with the exact (slower) elementwise check
    if not math.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NumericError(f"operation '{name}' produced non-finite values")


def _make(data: np.ndarray, inputs: tuple, backward_rule: Callable, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=np.float64)
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.node = None
    if out.requires_grad:
        out.node = OpNode(inputs, out, backward_rule, name)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_axis(t: Tensor, axis: int, name: str) -> int:
    if not isinstance(axis, (int, np.integer)):
        raise DimensionError(f"{name}: axis must be an int, got {axis!r}")
    if t.ndim == 0 or axis < -t.ndim or axis >= t.ndim:
        raise DimensionError(f"{name}: axis {axis} invalid for shape {t.shape}")
    axis = axis % t.ndim
    if t.shape[axis] == 0:
        raise DimensionError(f"{name}: empty axis {axis} for shape {t.shape}")
    return axis


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def rule(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return (ga, gb)

    return _make(data, (a, b), rule, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0.0):
        raise NumericError("div: divisor contains zeros")
    data = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            if b.requires_grad
            else None
        )
        return (ga, gb)

    return _make(data, (a, b), rule, "div")


def power(a: Tensor, exponent: Scalarish) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("power: only scalar exponents are supported")
    c = float(exponent)
    data = a.data**c
    return _make(data, (a,), lambda g: (g * c * a.data ** (c - 1.0),), "power")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log: input must be strictly positive")
    data = np.log(a.data)
    return _make(data, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise NumericError("sqrt: input must be nonnegative")
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-form GELU; smooth, so finite-difference checks behave."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    data = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(data, (a,), rule, "gelu")


def sign(a: Tensor) -> Tensor:
    """Elementwise sign. Forward-only: never participates in gradients."""
    return Tensor(np.sign(a.data))


# ---------------------------------------------------------------------------
# linear algebra / shape
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(f"matmul: need matching 2D or 3D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (ga, gb)

    return _make(data, (a, b), rule, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected 2D tensor, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from err
    return _make(data, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    if not parts:
        raise DimensionError("concatenate: need at least one tensor")
    axis = _check_axis(parts[0], axis, "concatenate")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tuple(parts), rule, "concatenate")


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select slices along ``axis`` by an index list (constant indices).

    Backward scatters the gradient to the selected indices only; repeated
    indices accumulate.
    """
    axis = _check_axis(a, axis, "gather")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"gather: indices must be 1D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise DimensionError(f"gather: index out of range for axis {axis} of shape {a.shape}")
    data = np.take(a.data, idx, axis=axis)

    def rule(g):
        out = np.zeros_like(a.data)
        key = (slice(None),) * axis + (idx,)
        np.add.at(out, key, g)
        return (out,)

    return _make(data, (a,), rule, "gather")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = _check_axis(a, axis, "sum")
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape),)

    return _make(data, (a,), rule, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[_check_axis(a, axis, "mean")]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


# ---------------------------------------------------------------------------
# composite ops
# ---------------------------------------------------------------------------


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Probability-normalise along ``axis`` with max-subtraction stability."""
    axis = _check_axis(v, axis, "softmax")
    e = np.exp(v.data - v.data.max(axis=axis, keepdims=True))
    data = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        gd = g * data
        return (gd - data * gd.sum(axis=axis, keepdims=True),)

    return _make(data, (v,), rule, "softmax")


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(v, axis, "log_softmax")
    centered = v.data - v.data.max(axis=axis, keepdims=True)
    data = centered - np.log(np.exp(centered).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (v,), rule, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError("layer_norm: gain/bias must match the last axis")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    sigma = np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    normed = centered / sigma
    data = normed * gain.data + bias.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            u = g * gain.data
            gx = (
                u
                - np.mean(u, axis=-1, keepdims=True)
                - normed * np.mean(u * normed, axis=-1, keepdims=True)
            ) / sigma
        ggain = np.sum(g * normed, axis=lead) if gain.requires_grad else None
        gbias = np.sum(g, axis=lead) if bias.requires_grad else None
        return (gx, ggain, gbias)

    return _make(data, (x, gain, bias), rule, "layer_norm")


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """uᵀv / (‖u‖‖v‖) over all elements; scalar output in [-1, 1]."""
    if u.shape != v.shape:
        raise DimensionError(f"cosine_similarity: shapes differ {u.shape} vs {v.shape}")
    if not np.any(u.data) or not np.any(v.data):
        raise DegenerateInputError("cosine_similarity: zero-norm input")
    dot = tsum(mul(u, v))
    nu = sqrt(tsum(mul(u, u)))
    nv = sqrt(tsum(mul(v, v)))
    return div(dot, mul(nu, nv))


def detach(t: Tensor) -> Tensor:
    return t.detach()
