# agrg/core/autodiff.py

"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Operations run eagerly on 64-bit floats. Inside an active `Graph` (entered as a
context manager) every operation whose inputs require gradients is appended to the
graph's tape, so the tape is in topological order by construction. Outside any
graph the same operations are plain forward computations; frozen upstream stages
and inference run that way.

    with Graph() as graph:
        loss = bce_loss(sigmoid(x @ w + b), y)
    grads = gradients(graph, loss)
"""

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from agrg.errors import GraphError, LabelError, NumericalError, ShapeError

DTYPE = np.float64
BCE_EPS = 1e-7
LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

_ACTIVE_GRAPH: ContextVar[Optional["Graph"]] = ContextVar("agrg_active_graph", default=None)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

# ==============================================================================
# 1. TENSOR
# ==============================================================================

class Tensor:
    """A dense float64 array, optionally a gradient-receiving leaf."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, scalar: float): return mul(self, 1.0 / float(scalar))
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return take(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: ArrayLike) -> Tensor:
    """Returns tensors unchanged and wraps anything else as a constant."""
    return value if isinstance(value, Tensor) else Tensor(value)

# ==============================================================================
# 2. COMPUTATION GRAPH
# ==============================================================================

@dataclass(frozen=True)
class Node:
    index: int
    kind: str
    inputs: Tuple[int, ...]
    output: Tensor
    backward: Optional[Backward]


class Graph:
    """
    Append-only tape of recorded operations.

    Tensors entering from outside the tape are registered on first use as `leaf`
    nodes (when they require gradients) or `const` nodes, so every node's inputs
    are earlier nodes. One graph belongs to one thread; the active graph is held in
    a context variable.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._index: Dict[int, int] = {}
        self._tokens: List = []

    def __enter__(self) -> "Graph":
        self._tokens.append(_ACTIVE_GRAPH.set(self))
        return self

    def __exit__(self, *exc_info) -> None:
        _ACTIVE_GRAPH.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def node_id(self, tensor: Tensor) -> Optional[int]:
        return self._index.get(id(tensor))

    def _append(self, kind: str, inputs: Tuple[int, ...], output: Tensor, backward: Optional[Backward]) -> int:
        index = len(self.nodes)
        self.nodes.append(Node(index, kind, inputs, output, backward))
        self._index[id(output)] = index
        return index

    def _register_input(self, tensor: Tensor) -> int:
        existing = self._index.get(id(tensor))
        if existing is not None:
            return existing
        return self._append("leaf" if tensor.requires_grad else "const", (), tensor, None)

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward: Backward) -> None:
        input_ids = tuple(self._register_input(tensor) for tensor in inputs)
        self._append(kind, input_ids, output, backward)

    def leaves(self) -> List[Tensor]:
        return [node.output for node in self.nodes if node.kind == "leaf"]

    def validate(self) -> None:
        """Checks the topological invariant: every input precedes its consumer."""
        for node in self.nodes:
            for input_id in node.inputs:
                if input_id >= node.index:
                    raise GraphError(f"cycle detected at node {node.index} ({node.kind}) via input {input_id}")


def active_graph() -> Optional[Graph]:
    return _ACTIVE_GRAPH.get()


@contextmanager
def no_grad():
    """Runs the block with no active graph: nothing is recorded."""
    token = _ACTIVE_GRAPH.set(None)
    try:
        yield
    finally:
        _ACTIVE_GRAPH.reset(token)


def _ensure_finite(kind: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by '{kind}'")


def _emit(kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward: Backward) -> Tensor:
    _ensure_finite(kind, data)
    graph = _ACTIVE_GRAPH.get()
    if graph is None or not any(tensor.requires_grad for tensor in inputs):
        return Tensor(data)
    output = Tensor(data, requires_grad=True)
    graph.record(kind, inputs, output, backward)
    return output


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, *shapes: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as error:
        raise ShapeError(f"{kind}: incompatible shapes {shapes}") from error

# ==============================================================================
# 3. PRIMITIVES
# ==============================================================================

# --- Elementwise arithmetic ---

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Adds a bias vector along the last axis."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match last axis of {x.shape}")
    return _emit("bias_add", (x, bias), x.data + bias.data,
                 lambda g: (g, _unbroadcast(g, bias.shape)))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _emit("matmul", (a, b), np.matmul(a.data, b.data), backward)

# --- Activations ---

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    u = x.data
    inner = _GELU_C * (u + _GELU_K * u ** 3)
    t = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * u ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t ** 2) * d_inner),)

    return _emit("gelu", (x,), 0.5 * u * (1.0 + t), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))

# --- Normalization & attention weights ---

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalizes over the last axis, then applies the learnable scale and shift."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: scale/shift must have shape {x.shape[-1:]}")
    n = x.shape[-1]
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def backward(g):
        d_hat = g * gamma.data
        grad_x = (inv_std / n) * (n * d_hat
                                  - d_hat.sum(axis=-1, keepdims=True)
                                  - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True))
        return grad_x, _unbroadcast(g * x_hat, gamma.shape), _unbroadcast(g, beta.shape)

    return _emit("layer_norm", (x, gamma, beta), x_hat * gamma.data + beta.data, backward)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Numerically stable softmax (row-max subtraction).

    `mask` (broadcastable boolean, True = visible) pins hidden entries to exactly zero
    probability; every row must keep at least one visible entry.
    """
    if x.size == 0:
        raise ShapeError("softmax of an empty tensor")
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("softmax received non-finite input")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=axis)):
            raise ShapeError("softmax: a row is fully masked")
        z = np.where(mask, z, -np.inf)
    shifted = np.exp(z - z.max(axis=axis, keepdims=True))
    y = shifted / shifted.sum(axis=axis, keepdims=True)
    return _emit("softmax", (x,), y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a rows x cols tensor, got {x.shape}")
    return softmax(x, axis=-1)

# --- Lookup & structural ---

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range for table with {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _emit("embedding", (table,), table.data[ids], backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as error:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from error
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tuple(tensors), data, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x: Tensor, index) -> Tensor:
    """Slicing / indexing (`x[index]`)."""
    data = np.array(x.data[index], dtype=DTYPE)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("slice", (x,), data, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as error:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from error
    return _emit("reshape", (x,), data, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.array(np.broadcast_to(g, shape))


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _emit("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)),
                 lambda g: (_expand_reduced(g, x.shape, axis, keepdims),))


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return _emit("mean", (x,), np.asarray(x.data.mean(axis=axis, keepdims=keepdims)),
                 lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / count,))

# --- Losses ---

def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    """
    Mean next-token negative log-likelihood over rows of `logits` (N x V).

    Rows whose target equals `ignore_index` contribute nothing and are excluded
    from the mean.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x V logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy: one target per logits row required")
    valid = np.ones_like(targets, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ShapeError("cross_entropy: every target position is ignored")
    safe_targets = np.where(valid, targets, 0)
    rows = np.arange(targets.shape[0])

    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -log_probs[rows, safe_targets][valid].sum() / count

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, safe_targets] -= 1.0
        grad[~valid] = 0.0
        return (g * grad / count,)

    return _emit("cross_entropy", (logits,), np.asarray(loss), backward)


def bce_loss(y_hat: ArrayLike, y: ArrayLike, reduction: str = "mean") -> Tensor:
    """
    Binary cross-entropy on probabilities, clamped to [BCE_EPS, 1 - BCE_EPS].

    reduction is one of "mean", "sum" or "none".
    """
    y_hat = as_tensor(y_hat)
    labels = np.asarray(y, dtype=DTYPE)
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise LabelError("bce_loss labels must be 0 or 1")
    labels = np.broadcast_to(labels, y_hat.shape)
    p = np.clip(y_hat.data, BCE_EPS, 1.0 - BCE_EPS)
    elementwise = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    inside = (y_hat.data > BCE_EPS) & (y_hat.data < 1.0 - BCE_EPS)
    local = (-(labels / p) + (1.0 - labels) / (1.0 - p)) * inside

    if reduction == "mean":
        scale = 1.0 / max(1, elementwise.size)
        return _emit("bce", (y_hat,), np.asarray(elementwise.mean()), lambda g: (g * local * scale,))
    if reduction == "sum":
        return _emit("bce", (y_hat,), np.asarray(elementwise.sum()), lambda g: (g * local,))
    if reduction == "none":
        return _emit("bce", (y_hat,), elementwise, lambda g: (g * local,))
    raise ValueError(f"unknown reduction '{reduction}'")

# ==============================================================================
# 4. BACKWARD PASS & VERIFICATION
# ==============================================================================

def gradients(graph: Graph, loss: Tensor, accumulate: bool = True) -> Dict[Tensor, np.ndarray]:
    """
    Back-propagates a scalar loss through the tape.

    Returns dLoss/dLeaf for every leaf that requires gradients and reaches the loss.
    With `accumulate` the gradients are also added into each leaf's `.grad`, so
    repeated calls without `zero_grad` sum up.
    """
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    root = graph.node_id(loss)
    if root is None:
        raise GraphError("loss was not recorded in this graph (does it depend on any parameter?)")
    graph.validate()

    pending: Dict[int, np.ndarray] = {root: np.ones_like(loss.data)}
    results: Dict[Tensor, np.ndarray] = {}
    for index in range(root, -1, -1):
        upstream = pending.pop(index, None)
        if upstream is None:
            continue
        node = graph.nodes[index]
        if node.kind == "leaf":
            results[node.output] = upstream
            continue
        if node.backward is None:
            continue
        for input_id, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not graph.nodes[input_id].output.requires_grad:
                continue
            pending[input_id] = pending[input_id] + grad if input_id in pending else grad

    if accumulate:
        for leaf, grad in results.items():
            leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
    return results


def zero_grad(params: Sequence[Tensor]) -> None:
    for param in params:
        param.grad = None


def finite_diff_check(loss_fn: Callable[[], Tensor], leaf: Tensor, delta: float = 1e-5) -> float:
    """
    Compares analytic gradients of `loss_fn()` w.r.t. `leaf` with central differences.

    `loss_fn` is re-evaluated at every perturbed value of the leaf, so it must build
    the computation from scratch each call. Returns the maximum over components of
    |analytic - central| / (|analytic| + |central| + 1e-12). The leaf's `.grad` is
    left untouched.
    """
    with Graph() as graph:
        loss = loss_fn()
    analytic = gradients(graph, loss, accumulate=False).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(leaf.data)

    worst = 0.0
    with no_grad():
        for index in np.ndindex(leaf.shape):
            original = leaf.data[index]
            leaf.data[index] = original + delta
            plus = loss_fn().item()
            leaf.data[index] = original - delta
            minus = loss_fn().item()
            leaf.data[index] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NumericalError(f"non-finite loss while perturbing component {index}")
            central = (plus - minus) / (2.0 * delta)
            exact = float(analytic[index])
            worst = max(worst, abs(exact - central) / (abs(exact) + abs(central) + 1e-12))
    return worst
