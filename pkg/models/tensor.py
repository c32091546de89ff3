# -*- coding: utf-8 -*-
# models/tensor.py
"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure that maps the
gradient of the output to gradients of the inputs. The graph is rebuilt on
each forward pass; `backward()` walks it once in reverse topological order
and accumulates into the `grad` buffers of leaves that require gradients.
"""
import logging
import threading
from contextlib import contextmanager
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes do not fit the op."""


class DegenerateRowError(ValueError):
    """A reduction row has every position masked out."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording graph nodes (per thread)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """
    A dense array of 64-bit floats that may take part in a compute graph.

    Leaves are created directly; interior nodes are created by the ops in
    this module and carry `parents` plus a `backward_fn`.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

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
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "ComputeGraph":
        return backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"


def parameter(data: ArrayLike) -> Tensor:
    """Trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values (shape {data.shape})")
    requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


class ComputeGraph:
    """Topologically ordered record of the nodes that lead to a root."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        # iterative post-order; recurrent graphs are deeper than the recursion limit
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if node.is_leaf]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, graph: Optional[ComputeGraph] = None) -> ComputeGraph:
    """
    Accumulate d(root)/d(leaf) into every requires_grad leaf.

    Calling this twice on the same graph without zeroing leaf grads adds the
    gradients twice.

    Args:
        root: scalar tensor
        graph: previously traced graph of `root`, traced on demand if omitted

    Returns:
        ComputeGraph: the graph that was walked
    """
    if root.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
    graph = graph if graph is not None else ComputeGraph.trace(root)
    if not root.requires_grad:
        return graph

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.backward_fn is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    return graph


# ---------------------------------------------------------------- products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    `b` is either a 2-D weight shared across the leading axes of `a`, or has
    the same leading (batch) axes as `a`.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    shared_weight = b.ndim == 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")

    a_data, b_data = a.data, b.data
    out = np.matmul(a_data, b_data)

    def _backward(grad):
        grad_a = np.matmul(grad, np.swapaxes(b_data, -1, -2))
        if shared_weight:
            k, n = b_data.shape
            grad_b = a_data.reshape(-1, k).T @ grad.reshape(-1, n)
        else:
            grad_b = np.matmul(np.swapaxes(a_data, -1, -2), grad)
        return grad_a, grad_b

    return _make(out, (a, b), _backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(a.data, -1, -2)
    return _make(out.copy(), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


# ------------------------------------------------------------- elementwise

class ElementwiseOp(str, Enum):
    TANH = "tanh"
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"
    ABS = "abs"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0.0
    out = np.where(positive, a.data, 0.0)
    return _make(out, (a,), lambda g: (g * positive,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def identity(a: Tensor) -> Tensor:
    return a


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    a_data, b_data = a.data, b.data
    return _make(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data), "mul")


_UNARY = {
    ElementwiseOp.TANH: tanh,
    ElementwiseOp.RELU: relu,
    ElementwiseOp.SIGMOID: sigmoid,
    ElementwiseOp.IDENTITY: identity,
    ElementwiseOp.ABS: absolute,
}
_BINARY = {ElementwiseOp.ADD: add, ElementwiseOp.SUB: sub, ElementwiseOp.MUL: mul}


def elementwise(op_kind: Union[str, ElementwiseOp], a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch a pointwise op by name."""
    kind = ElementwiseOp(op_kind)
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind.value} needs two operands")
        return _BINARY[kind](a, b)
    return _UNARY[kind](a)


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of `a`."""
    if bias.ndim != 1 or bias.shape[0] != a.shape[-1]:
        raise ShapeError(f"bias of shape {bias.shape} does not fit {a.shape}")
    width = bias.shape[0]
    return _make(a.data + bias.data, (a, bias), lambda g: (g, g.reshape(-1, width).sum(axis=0)), "add_bias")


def scale(a: Tensor, factor: float) -> Tensor:
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def apply_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to `a`."""
    full = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.shape)
    return _make(a.data * full, (a,), lambda g: (g * full,), "apply_mask")


def blend(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """mask * a + (1 - mask) * b with a constant 0/1 mask broadcastable to `a`."""
    _same_shape(a, b, "blend")
    keep = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.shape)
    out = keep * a.data + (1.0 - keep) * b.data
    return _make(out, (a, b), lambda g: (g * keep, g * (1.0 - keep)), "blend")


# --------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shapes do not agree: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum(sizes)[:-1]

    def _backward(grad):
        return tuple(np.split(grad, bounds, axis=axis))

    return _make(out, tuple(tensors), _backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def _backward(grad):
        return tuple(np.take(grad, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), _backward, "stack")


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Take one index along `axis`, dropping that axis."""
    axis = axis % a.ndim
    out = np.take(a.data, index, axis=axis)
    shape = a.shape

    def _backward(grad):
        full = np.zeros(shape)
        slicer = [slice(None)] * len(shape)
        slicer[axis] = index
        full[tuple(slicer)] = grad
        return (full,)

    return _make(out, (a,), _backward, "select")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of the last axis."""
    out = a.data[..., start:stop].copy()
    shape = a.shape

    def _backward(grad):
        full = np.zeros(shape)
        full[..., start:stop] = grad
        return (full,)

    return _make(out, (a,), _backward, "slice_last")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum_all")


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def weighted_layer_sum(layers: Tensor, weights: Tensor) -> Tensor:
    """Combine [..., L, D] layer vectors with L weights into [..., D]."""
    if weights.ndim != 1 or layers.ndim < 2 or layers.shape[-2] != weights.shape[0]:
        raise ShapeError(f"cannot mix {layers.shape} with weights {weights.shape}")
    stacked, w = layers.data, weights.data
    out = np.einsum("...ld,l->...d", stacked, w)

    def _backward(grad):
        grad_layers = grad[..., None, :] * w[:, None]
        grad_w = np.einsum("...ld,...d->l", stacked, grad)
        return grad_layers, grad_w

    return _make(out, (layers, weights), _backward, "weighted_layer_sum")


# -------------------------------------------------------------- reductions

class ReduceOp(str, Enum):
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"
    SOFTMAX = "softmax"
    LOG_SOFTMAX = "log_softmax"


def _masked_softmax(x: np.ndarray, keep: np.ndarray, axis: int) -> np.ndarray:
    z = np.where(keep, x, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def reduce(op_kind: Union[str, ReduceOp], a: Tensor, axis: int = -1, mask: Optional[ArrayLike] = None) -> Tensor:
    """
    Reduce or normalize along one axis, optionally ignoring masked positions.

    sum / mean / max drop `axis`; softmax / log_softmax keep the shape and
    give masked positions probability 0 (log-probability entries are 0 there
    and carry no gradient).

    Args:
        op_kind: one of sum, mean, max, softmax, log_softmax
        a: input tensor
        axis: axis to reduce over
        mask: 0/1 array broadcastable to `a.shape`; 0 excludes a position

    Raises:
        DegenerateRowError: a row has no unmasked position
    """
    kind = ReduceOp(op_kind)
    axis = axis % a.ndim
    x = a.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        try:
            keep = np.broadcast_to(np.asarray(mask) > 0.5, x.shape)
        except ValueError as e:
            raise ShapeError(f"mask {np.shape(mask)} does not broadcast to {x.shape}") from e
        if not keep.any(axis=axis).all():
            raise DegenerateRowError(f"{kind.value} over axis {axis}: a row is fully masked")

    if kind is ReduceOp.SUM:
        out = np.where(keep, x, 0.0).sum(axis=axis)
        return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * keep,), "sum")

    if kind is ReduceOp.MEAN:
        counts = keep.sum(axis=axis)
        out = np.where(keep, x, 0.0).sum(axis=axis) / counts
        return _make(out, (a,), lambda g: (np.expand_dims(g / counts, axis) * keep,), "mean")

    if kind is ReduceOp.MAX:
        filled = np.where(keep, x, -np.inf)
        idx = np.argmax(filled, axis=axis)
        idx_k = np.expand_dims(idx, axis)
        out = np.take_along_axis(x, idx_k, axis=axis).squeeze(axis)

        def _max_backward(grad):
            full = np.zeros(x.shape)
            np.put_along_axis(full, idx_k, np.expand_dims(grad, axis), axis=axis)
            return (full,)

        return _make(out, (a,), _max_backward, "max")

    probs = _masked_softmax(x, keep, axis)
    if kind is ReduceOp.SOFTMAX:
        def _softmax_backward(grad):
            return (probs * (grad - (grad * probs).sum(axis=axis, keepdims=True)),)

        return _make(probs, (a,), _softmax_backward, "softmax")

    z = np.where(keep, x, -np.inf)
    peak = z.max(axis=axis, keepdims=True)
    lse = peak + np.log(np.where(keep, np.exp(z - peak), 0.0).sum(axis=axis, keepdims=True))
    out = np.where(keep, x - lse, 0.0)

    def _log_softmax_backward(grad):
        total = np.where(keep, grad, 0.0).sum(axis=axis, keepdims=True)
        return (np.where(keep, grad - probs * total, 0.0),)

    return _make(out, (a,), _log_softmax_backward, "log_softmax")


# ------------------------------------------------------------------ losses

class LossKind(str, Enum):
    MSE = "mse"
    MAE = "mae"
    CROSS_ENTROPY = "cross_entropy"


def loss(kind: Union[str, LossKind], pred: Tensor, target: ArrayLike) -> Tensor:
    """
    Batch-mean loss as a scalar tensor.

    For mse / mae, `pred` and `target` hold one value per example (any shape
    with the same number of entries). For cross_entropy, `pred` holds
    [batch x classes] logits and `target` class indices.
    """
    kind = LossKind(kind)
    gold = np.asarray(target.data if isinstance(target, Tensor) else target)

    if kind is LossKind.CROSS_ENTROPY:
        if pred.ndim != 2:
            raise ShapeError(f"cross_entropy needs [batch x classes] logits, got {pred.shape}")
        n, classes = pred.shape
        labels = gold.astype(np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise ShapeError(f"{labels.shape[0]} targets for {n} predictions")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
            raise ValueError(f"class index out of range [0, {classes})")
        logits = pred.data
        peak = logits.max(axis=1, keepdims=True)
        lse = peak[:, 0] + np.log(np.exp(logits - peak).sum(axis=1))
        picked = logits[np.arange(n), labels]
        out = np.asarray(np.mean(lse - picked))
        probs = np.exp(logits - lse[:, None])

        def _ce_backward(grad):
            full = probs.copy()
            full[np.arange(n), labels] -= 1.0
            return (full * (float(grad) / n),)

        return _make(out, (pred,), _ce_backward, "cross_entropy")

    values = pred.data.reshape(-1)
    gold = gold.astype(np.float64).reshape(-1)
    if values.shape != gold.shape:
        raise ShapeError(f"{gold.shape[0]} targets for {values.shape[0]} predictions")
    residual = values - gold
    n = residual.shape[0]
    shape = pred.shape
    if kind is LossKind.MSE:
        out = np.asarray(np.mean(residual ** 2))
        return _make(out, (pred,), lambda g: ((2.0 * float(g) / n * residual).reshape(shape),), "mse")
    out = np.asarray(np.mean(np.abs(residual)))
    return _make(out, (pred,), lambda g: ((float(g) / n * np.sign(residual)).reshape(shape),), "mae")


# ----------------------------------------------------------------- dropout

class DropoutKind(str, Enum):
    STANDARD = "standard"
    VARIATIONAL = "variational"


def dropout_mask(kind: Union[str, DropoutKind], shape: Tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray:
    """
    Inverted-dropout mask. Variational masks for [batch x time x dim] inputs
    are drawn once per sequence and repeated over the time axis.
    """
    kind = DropoutKind(kind)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    draw_shape = shape
    if kind is DropoutKind.VARIATIONAL and len(shape) == 3:
        draw_shape = (shape[0], 1, shape[2])
    mask = (rng.random(draw_shape) >= rate) / (1.0 - rate)
    return np.broadcast_to(mask, shape)


def dropout(
    kind: Union[str, DropoutKind],
    a: Tensor,
    rate: float,
    training: bool,
    rng: Optional[np.random.Generator],
) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    return apply_mask(a, dropout_mask(kind, a.shape, rate, rng))
