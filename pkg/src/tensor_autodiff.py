# src/tensor_autodiff.py

import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import erf, expit

from src.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5
_INV_SQRT_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Each thread records into its own graph stack, so evaluation threads that never
# open a Graph compute plain values on shared parameters.
_state = threading.local()


def _graph_stack() -> List["Graph"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def current_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense f64 array that can take part in a recorded differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph", "_node")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.array(data, dtype=np.float64)
        if any(dim < 1 for dim in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: "Graph | None" = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal results skip the copy and validation of __init__.
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._graph = None
        t._node = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return Mul.apply(self, as_tensor(-1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return Sum.apply(self, axis=axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return Mean.apply(self, axis=axis)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=tuple(shape))

    def permute(self, *axes: int) -> "Tensor":
        return Permute.apply(self, axes=tuple(axes))


def as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


def zeros(*shape: int) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


# --- Graph recording ---

class _Context:
    """Scratch space an op fills during forward and reads back during backward."""

    def __init__(self) -> None:
        self.saved: Tuple[Any, ...] = ()

    def save(self, *values: Any) -> None:
        self.saved = values


@dataclass
class OpRecord:
    kind: str
    inputs: Tuple[int | None, ...]
    output: int
    ctx: _Context
    backward: Callable[[_Context, np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """
    Eagerly records the ops of one forward pass. Records are appended in
    execution order, so every input id precedes its consumer; backward walks
    them once in reverse and then drops them.

    Use as a context manager: ops run inside the ``with`` block are recorded
    on the current thread only.
    """

    def __init__(self) -> None:
        self.records: List[OpRecord] = []
        self._leaves: Dict[int, Tensor] = {}
        self._next_id = 0

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _new_id(self) -> int:
        node = self._next_id
        self._next_id += 1
        return node

    def node_of(self, t: Tensor) -> int | None:
        if t._graph is self:
            return t._node
        if not t.requires_grad:
            return None
        # A trainable leaf joins this graph on first use.
        node = self._new_id()
        t._graph = self
        t._node = node
        self._leaves[node] = t
        return node

    def record(self, fn: type, ctx: _Context, inputs: Tuple[int | None, ...], out: Tensor) -> None:
        node = self._new_id()
        out._graph = self
        out._node = node
        out.requires_grad = True
        self.records.append(OpRecord(fn.__name__, inputs, node, ctx, fn.backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._graph is not self:
            raise ContractError("loss was not produced through this graph")

        grads: Dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            for node, g_in in zip(rec.inputs, rec.backward(rec.ctx, g)):
                if node is None or g_in is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + g_in
                else:
                    grads[node] = g_in

        for node, leaf in self._leaves.items():
            g = grads.get(node)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            leaf._graph = None
            leaf._node = None

        logger.debug(f"Backward pass over {len(self.records)} records finished.")
        self.records.clear()
        self._leaves.clear()


def backward(loss: Tensor) -> None:
    """Fills ``grad`` of every trainable leaf that ``loss`` depends on."""
    if loss._graph is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        raise ContractError("loss was not produced through a recorded graph")
    loss._graph.backward(loss)


class Function:
    """Base class for differentiable ops: forward on arrays, backward on the output grad."""

    @staticmethod
    def forward(ctx: _Context, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: _Context, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        ctx = _Context()
        out = Tensor._wrap(cls.forward(ctx, *[t.data for t in tensors], **kwargs))
        graph = current_graph()
        if graph is not None:
            inputs = tuple(graph.node_of(t) for t in tensors)
            if any(node is not None for node in inputs):
                graph.record(cls, ctx, inputs, out)
        return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    for _ in range(grad.ndim - len(shape)):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


# --- Elementwise arithmetic ---

class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        shape_a, shape_b = ctx.saved
        return _unbroadcast(grad, shape_a), _unbroadcast(grad, shape_b)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        shape_a, shape_b = ctx.saved
        return _unbroadcast(grad, shape_a), _unbroadcast(-grad, shape_b)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


# --- Linear algebra and shape ---

class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul cannot combine shapes {a.shape} and {b.shape}")
    return MatMul.apply(a, b)


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.save(x.shape)
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        return (grad.reshape(shape),)


class Permute(Function):
    @staticmethod
    def forward(ctx, x, axes):
        ctx.save(axes)
        return np.transpose(x, axes)

    @staticmethod
    def backward(ctx, grad):
        (axes,) = ctx.saved
        return (np.transpose(grad, np.argsort(axes)),)


class BroadcastTo(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.save(x.shape)
        return np.broadcast_to(x, shape).copy()

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        return (_unbroadcast(grad, shape),)


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shape {x.shape} to {shape}") from None
    return BroadcastTo.apply(x, shape=tuple(shape))


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx.save(axis, [arr.shape[axis] for arr in arrays])
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        axis, sizes = ctx.saved
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=axis))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    first = tensors[0].shape
    ax = axis % len(first)
    for t in tensors[1:]:
        if t.ndim != len(first) or any(
            t.shape[i] != first[i] for i in range(len(first)) if i != ax
        ):
            raise ShapeError(f"concat along axis {axis} cannot combine shapes {first} and {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors, axis=ax)


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    """``a``'s entries precede ``b``'s along the last axis."""
    return concat([a, b], axis=-1)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stacks sequences along the row (second to last) axis."""
    return concat(tensors, axis=-2)


class SliceAxis(Function):
    @staticmethod
    def forward(ctx, x, axis, start, stop):
        ctx.save(x.shape, axis, start, stop)
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        return x[tuple(index)].copy()

    @staticmethod
    def backward(ctx, grad):
        shape, axis, start, stop = ctx.saved
        full = np.zeros(shape)
        index = [slice(None)] * len(shape)
        index[axis] = slice(start, stop)
        full[tuple(index)] = grad
        return (full,)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {x.shape}")
    return SliceAxis.apply(x, axis=ax, start=start, stop=stop)


class TakeRows(Function):
    @staticmethod
    def forward(ctx, table, ids):
        ctx.save(table.shape, ids)
        return table[ids]

    @staticmethod
    def backward(ctx, grad):
        shape, ids = ctx.saved
        full = np.zeros(shape)
        np.add.at(full, ids, grad)
        return (full,)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    return TakeRows.apply(table, ids=np.asarray(ids, dtype=np.int64))


# --- Reductions ---

class Sum(Function):
    @staticmethod
    def forward(ctx, x, axis):
        ctx.save(x.shape, axis)
        return np.sum(x, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        shape, axis = ctx.saved
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, x, axis):
        ctx.save(x.shape, axis)
        return np.mean(x, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        shape, axis = ctx.saved
        count = int(np.prod(shape)) if axis is None else shape[axis]
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / count, shape).copy(),)


class ReduceExtreme(Function):
    """Max or min over one axis; the gradient goes to the first extreme entry."""

    @staticmethod
    def forward(ctx, x, axis, largest):
        idx = np.argmax(x, axis=axis) if largest else np.argmin(x, axis=axis)
        idx = np.expand_dims(idx, axis)
        ctx.save(x.shape, axis, idx)
        return np.take_along_axis(x, idx, axis=axis).squeeze(axis)

    @staticmethod
    def backward(ctx, grad):
        shape, axis, idx = ctx.saved
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(grad, axis), axis=axis)
        return (full,)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    return ReduceExtreme.apply(x, axis=axis % x.ndim, largest=True)


def reduce_min(x: Tensor, axis: int) -> Tensor:
    return ReduceExtreme.apply(x, axis=axis % x.ndim, largest=False)


# --- Nonlinearities and normalization ---

class Gelu(Function):
    @staticmethod
    def forward(ctx, x):
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT_2))
        ctx.save(x, cdf)
        return x * cdf

    @staticmethod
    def backward(ctx, grad):
        x, cdf = ctx.saved
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (cdf + x * pdf),)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf form of the normal CDF."""
    return Gelu.apply(x)


class LayerNorm(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = np.mean(centered * centered, axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        ctx.save(xhat, inv_std, gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, grad):
        xhat, inv_std, gamma = ctx.saved
        lead = tuple(range(grad.ndim - 1))
        grad_gamma = np.sum(grad * xhat, axis=lead)
        grad_beta = np.sum(grad, axis=lead)
        gx = grad * gamma
        grad_x = inv_std * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * np.mean(gx * xhat, axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm over last axis {d} of {x.shape} got gamma {gamma.shape}, beta {beta.shape}"
        )
    if eps <= 0:
        raise ContractError(f"layernorm eps must be positive, got {eps}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class SoftmaxRows(Function):
    @staticmethod
    def forward(ctx, x):
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        out = shifted / shifted.sum(axis=-1, keepdims=True)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (s,) = ctx.saved
        return (s * (grad - np.sum(grad * s, axis=-1, keepdims=True)),)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    return SoftmaxRows.apply(x)


# --- Losses ---

class CrossEntropy(Function):
    @staticmethod
    def forward(ctx, logits, labels):
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_probs = shifted - log_z
        rows = np.arange(logits.shape[0])
        ctx.save(np.exp(log_probs), labels)
        return np.asarray(-log_probs[rows, labels].mean())

    @staticmethod
    def backward(ctx, grad):
        probs, labels = ctx.saved
        g = probs.copy()
        g[np.arange(g.shape[0]), labels] -= 1.0
        return (g * (grad / g.shape[0]),)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` [B x C] against integer labels."""
    return CrossEntropy.apply(logits, labels=np.asarray(labels, dtype=np.int64))


class BceWithLogits(Function):
    @staticmethod
    def forward(ctx, logits, targets):
        ctx.save(logits, targets)
        per_bit = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
        return np.asarray(per_bit.mean())

    @staticmethod
    def backward(ctx, grad):
        logits, targets = ctx.saved
        return ((expit(logits) - targets) * (grad / logits.size),)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over every bit of ``logits``."""
    return BceWithLogits.apply(logits, targets=np.asarray(targets, dtype=np.float64))


# --- Verification oracle ---

def finite_diff_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5) -> float:
    """
    Compares reverse-mode gradients of the scalar ``f()`` with central
    differences on every coordinate of ``leaves``.

    Returns the max over coordinates of |ad - fd| / max(1, |ad|, |fd|).
    ``f`` must rebuild its value from the leaves' current data on every call.
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")

    for leaf in leaves:
        leaf.zero_grad()
    with Graph() as graph:
        loss = f()
        graph.backward(loss)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = f().item()
            flat[i] = original - h
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            ad = flat_grad[i]
            err = abs(ad - numeric) / max(1.0, abs(ad), abs(numeric))
            worst = max(worst, err)
    logger.debug(f"Finite-difference check over {len(leaves)} leaves: max relative error {worst:.3e}")
    return worst
