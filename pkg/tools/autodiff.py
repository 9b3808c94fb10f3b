"""
Reverse-mode automatic differentiation over dense float64 arrays,
with an Adam optimizer (decoupled decay) and the step learning-rate schedule
used for network training
"""

from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np


class AutodiffError(Exception):
    """Base error for the differentiation engine"""


class ShapeMismatch(AutodiffError, ValueError):
    pass


class NonScalarLoss(AutodiffError, ValueError):
    pass


class NonFiniteGradient(AutodiffError, FloatingPointError):
    pass


class TotalTooSmall(AutodiffError, ValueError):
    pass


class Value:
    """A node in the computation graph

    Leaves hold parameters or constants; interior nodes remember their
    parents and a closure that pushes ``grad`` back into them.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, parents: Tuple["Value", ...] = (),
                 op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents = parents
        self.op = op
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Value(shape={self.data.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return slice_(self, index)


ValueLike = Union[Value, np.ndarray, float, int]


def as_value(x: ValueLike) -> Value:
    return x if isinstance(x, Value) else Value(x)


def parameter(data) -> Value:
    """Trainable leaf sharing memory with ``data`` when it is already float64"""
    return Value(data, requires_grad=True)


def _node(data: np.ndarray, parents: Sequence[Value], op: str) -> Value:
    requires = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=requires, parents=tuple(parents) if requires else (), op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Value, b: Value, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from e


# --- graph ops ---------------------------------------------------------------

def add(a: ValueLike, b: ValueLike) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "add")
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.shape)
        out._backward = _backward
    return out


def sub(a: ValueLike, b: ValueLike) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "sub")
    out = _node(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(out.grad, b.shape)
        out._backward = _backward
    return out


def mul(a: ValueLike, b: ValueLike) -> Value:
    """Elementwise product"""
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "mul")
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b.data, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad * a.data, b.shape)
        out._backward = _backward
    return out


def scale(x: ValueLike, c: float) -> Value:
    x = as_value(x)
    c = float(c)
    out = _node(x.data * c, (x,), "scale")
    if out.requires_grad:
        def _backward():
            x.grad += out.grad * c
        out._backward = _backward
    return out


def matmul(a: ValueLike, b: ValueLike) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or (a.data.ndim == 1 and b.data.ndim == 1):
        raise ShapeMismatch(f"matmul supports matrix-matrix and matrix-vector, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if a.data.ndim == 2 and b.data.ndim == 2:
                ga, gb = g @ b.data.T, a.data.T @ g
            elif b.data.ndim == 1:
                ga, gb = np.outer(g, b.data), a.data.T @ g
            else:
                ga, gb = b.data @ g, np.outer(a.data, g)
            if a.requires_grad:
                a.grad += ga
            if b.requires_grad:
                b.grad += gb
        out._backward = _backward
    return out


def relu(x: ValueLike) -> Value:
    x = as_value(x)
    mask = x.data > 0
    out = _node(np.where(mask, x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        def _backward():
            x.grad += out.grad * mask
        out._backward = _backward
    return out


def maximum(x: ValueLike, c: float) -> Value:
    """max(x, c) with a constant; subgradient zero at the tie"""
    x = as_value(x)
    mask = x.data > c
    out = _node(np.where(mask, x.data, c), (x,), "maximum")
    if out.requires_grad:
        def _backward():
            x.grad += out.grad * mask
        out._backward = _backward
    return out


def square(x: ValueLike) -> Value:
    x = as_value(x)
    out = _node(x.data * x.data, (x,), "square")
    if out.requires_grad:
        def _backward():
            x.grad += 2.0 * x.data * out.grad
        out._backward = _backward
    return out


def sum_(x: ValueLike, axis: Optional[int] = None) -> Value:
    x = as_value(x)
    out = _node(np.sum(x.data, axis=axis), (x,), "sum")
    if out.requires_grad:
        def _backward():
            g = out.grad if axis is None else np.expand_dims(out.grad, axis)
            x.grad += np.broadcast_to(g, x.shape)
        out._backward = _backward
    return out


def concat(values: Sequence[ValueLike], axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {[v.shape for v in values]} along axis {axis}") from e
    out = _node(data, values, "concat")
    if out.requires_grad:
        bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
        def _backward():
            for v, g in zip(values, np.split(out.grad, bounds, axis=axis)):
                if v.requires_grad:
                    v.grad += g
        out._backward = _backward
    return out


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def slice_(x: ValueLike, index) -> Value:
    x = as_value(x)
    out = _node(x.data[index], (x,), "slice")
    if out.requires_grad:
        fancy = _is_fancy(index)
        def _backward():
            if fancy:
                np.add.at(x.grad, index, out.grad)
            else:
                x.grad[index] += out.grad
        out._backward = _backward
    return out


# --- backward pass -----------------------------------------------------------

def _topological_order(root: Value) -> List[Value]:
    order, seen = [], set()
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def zero_grad(params: Iterable[Value]) -> None:
    for p in params:
        if p.requires_grad:
            p.grad = np.zeros_like(p.data)


def backward(loss: Value, params: Optional[Iterable[Value]] = None) -> None:
    """
    Accumulate d(loss)/d(node) into every node reachable from ``loss``.

    Gradients are reset first, on the graph and on ``params`` when given,
    so leaves that do not feed the loss end up with zero gradient.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if params is not None:
        zero_grad(params)
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        if node.requires_grad:
            node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


# --- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first_moments: List[np.ndarray] = field(default_factory=list)
    second_moments: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params: Sequence[Value], lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0) -> "OptimizerState":
        return cls(
            lr=lr,
            betas=betas,
            eps=eps,
            weight_decay=weight_decay,
            first_moments=[np.zeros_like(p.data) for p in params],
            second_moments=[np.zeros_like(p.data) for p in params],
        )


def adamw_step(state: OptimizerState, params: Sequence[Value],
               grads: Optional[Sequence[np.ndarray]] = None) -> Sequence[Value]:
    """One Adam update with bias correction and decoupled decay, in place"""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(state.first_moments):
        raise ShapeMismatch(f"optimizer holds {len(state.first_moments)} moments, got {len(grads)} gradients")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or inf")

    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params


def lr_schedule(epoch: int, total_epochs: int, base: float = 1e-3,
                decay_window: int = 500, decay_every: int = 100, factor: float = 0.5) -> float:
    """
    Constant ``base`` rate, then halved every ``decay_every`` epochs over the
    last ``decay_window`` epochs. The first halving applies at the window start.
    """
    if total_epochs < decay_window:
        raise TotalTooSmall(f"total_epochs must be at least {decay_window}, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    start = total_epochs - decay_window
    if epoch < start:
        return base
    return base * factor ** (1 + (epoch - start) // decay_every)


def numerical_gradient(f: Callable[[], float], param: Value, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one leaf"""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = f()
        flat[i] = saved - h
        down = f()
        flat[i] = saved
        out[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0
