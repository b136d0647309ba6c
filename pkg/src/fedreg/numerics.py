"""Dense tensors with tape-style reverse-mode automatic differentiation.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to parent adjoints. The graph is rebuilt on
every training step; recorded values are never mutated in place.

Example:
    from fedreg import numerics as nx

    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    loss = nx.squared_l2_norm(x)
    grads = nx.backward(loss)
    grads[x.id]  # array([2., 4.])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, ContractViolation

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_node_ids = itertools.count()
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))
_GELU_C = 0.044715


class Tensor:
    """A graph node holding a float64 value.

    Leaves created with ``requires_grad=True`` are differentiable inputs;
    leaves without it are constants and stop gradient flow.
    """

    __slots__ = ("id", "data", "requires_grad", "op", "parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
    ) -> None:
        self.id = next(_node_ids)
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "TensorLike") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "TensorLike") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "TensorLike") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "TensorLike") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "TensorLike") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: "TensorLike") -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: "TensorLike") -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "TensorLike") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: object) -> "Tensor":
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


TensorLike = Union[Tensor, ArrayLike]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap plain arrays and scalars as constant tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value: TensorLike) -> Tensor:
    """Return a non-differentiable copy of ``value`` (stop-gradient)."""
    data = value.data if isinstance(value, Tensor) else value
    return Tensor(np.array(data, dtype=np.float64))


def _make(
    data: np.ndarray,
    op: str,
    parents: tuple[Tensor, ...],
    backward_fn: BackwardFn,
) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, op=op, parents=parents, backward_fn=backward_fn)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# Elementwise arithmetic


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), backward_fn)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), backward_fn)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), backward_fn)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, "div", (a, b), backward_fn)


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def clamp_min(a: TensorLike, minimum: float) -> Tensor:
    """Elementwise ``max(a, minimum)``; gradient is zero where clamped."""
    a = as_tensor(a)
    passed = a.data >= minimum
    return _make(np.maximum(a.data, minimum), "clamp_min", (a,), lambda g: (g * passed,))


def gelu(a: TensorLike) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make(out, "gelu", (a,), backward_fn)


# Linear algebra and shape manipulation


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, "matmul", (a, b), backward_fn)


def transpose(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ConfigurationError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a: TensorLike, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out.copy(), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def take(a: TensorLike, index: object) -> Tensor:
    """Basic or advanced numpy indexing (gather/slice)."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ConfigurationError(f"take: index invalid for shape {a.shape}: {exc}") from None

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), "take", (a,), backward_fn)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ConfigurationError("concat: need at least one tensor")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise ConfigurationError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward_fn(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return _make(out, "concat", parts, backward_fn)


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise ConfigurationError(f"stack: incompatible shapes {shapes}") from None

    def backward_fn(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(parts))]

    return _make(out, "stack", parts, backward_fn)


# Reductions


def sum(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), backward_fn)


def mean(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def squared_l2_norm(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.sum(a.data * a.data), "squared_l2_norm", (a,), lambda g: (2.0 * g * a.data,))


def logsumexp(a: TensorLike, axis: int = -1) -> Tensor:
    """Log-sum-exp along ``axis``; slices that are entirely -inf give -inf."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.log(np.sum(np.exp(a.data - safe_m), axis=axis, keepdims=True)) + safe_m

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        finite = np.isfinite(lse)
        weights = np.where(finite, np.exp(a.data - np.where(finite, lse, 0.0)), 0.0)
        return (weights * np.expand_dims(g, axis),)

    return _make(np.squeeze(lse, axis=axis), "logsumexp", (a,), backward_fn)


# Normalisation and activations


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    """Row-wise softmax with max subtraction."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), backward_fn)


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), backward_fn)


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ConfigurationError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gain.data + bias.data

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, "layer_norm", (x, gain, bias), backward_fn)


# Reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in visited:
            continue
        visited.add(node.id)
        stack_.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and parent.id not in visited:
                stack_.append((parent, False))
    return order


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Propagate adjoints from a scalar ``root``.

    Returns:
        Adjoints keyed by node id for every differentiable node reachable
        from ``root``.

    Raises:
        ContractViolation: If ``root`` is not scalar-valued.
    """
    if root.data.size != 1:
        raise ContractViolation(f"backward() needs a scalar root, got shape {root.shape}")
    adjoints: dict[int, np.ndarray] = {}
    if not root.requires_grad:
        return adjoints
    adjoints[root.id] = np.ones_like(root.data)
    for node in reversed(_topological_order(root)):
        g = adjoints.get(node.id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in adjoints:
                adjoints[parent.id] = adjoints[parent.id] + pg
            else:
                adjoints[parent.id] = np.array(pg, dtype=np.float64).reshape(parent.shape)
    return adjoints


def grad(root: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of ``root`` for named leaves; unused leaves get zeros."""
    adjoints = backward(root)
    return {
        name: adjoints.get(leaf.id, np.zeros_like(leaf.data)).copy()
        for name, leaf in leaves.items()
    }


# Finite-difference checking


@dataclass
class GradCheckResult:
    """Outcome of comparing autodiff and central finite differences."""

    passed: bool
    max_abs_error: float
    max_rel_error: float
    failures: list[str] = field(default_factory=list)


def numeric_gradient(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: Optional[Iterable[str]] = None,
) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar function of named arrays.

    Only the arrays in ``names`` are perturbed (all of them by default).
    """
    base = {name: np.array(value, dtype=np.float64) for name, value in inputs.items()}
    result: dict[str, np.ndarray] = {}
    for name in (list(names) if names is not None else list(base)):
        value = base[name]
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = fn({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = original - eps
            minus = fn({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = original
            g.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
        result[name] = g
    return result


def gradient_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    wrt: Optional[Iterable[str]] = None,
) -> GradCheckResult:
    """Compare autodiff gradients of ``fn`` with central finite differences.

    An entry passes when its absolute error is within ``atol`` or its relative
    error (against the larger magnitude of the two estimates) within ``rtol``.
    """
    names = list(wrt) if wrt is not None else list(inputs)
    leaves = {
        name: Tensor(np.array(value, dtype=np.float64), requires_grad=name in names)
        for name, value in inputs.items()
    }
    analytic = grad(fn(leaves), {name: leaves[name] for name in names})
    numeric = numeric_gradient(fn, inputs, eps=eps, names=names)

    result = GradCheckResult(passed=True, max_abs_error=0.0, max_rel_error=0.0)
    for name in names:
        a, n = analytic[name], numeric[name]
        abs_err = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel_err = np.where(scale > 0, abs_err / np.where(scale > 0, scale, 1.0), 0.0)
        result.max_abs_error = max(result.max_abs_error, float(abs_err.max(initial=0.0)))
        result.max_rel_error = max(result.max_rel_error, float(rel_err.max(initial=0.0)))
        bad = (abs_err > atol) & (rel_err > rtol)
        if bad.any():
            result.passed = False
            result.failures.append(
                f"{name}: {int(bad.sum())} entries off, max abs {float(abs_err.max()):.3e}"
            )
    return result
