"""
Spatial Forcing Lab - Tensor Engine

Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable computation in the lab goes through ``apply``. Each op
kind registers a shape rule, a forward and a backward; ``backward`` walks the
recorded graph in reverse topological order and frees it afterwards.

Shape rules
-----------
matmul                a [..., m, k] @ b [k, n] or b [..., k, n] (equal batch dims)
add / sub / mul_elementwise
                      numpy broadcasting between the two inputs
scale                 any shape; attrs ``factor``
mean / sum            any shape; attrs ``axis`` (None, int or tuple), ``keepdims``
transpose             attrs ``axes`` permutation (default: swap the last two axes)
reshape               attrs ``shape``; element count preserved
concat                equal rank, equal sizes off ``axis``
slice                 attrs ``axis``, ``start``, ``stop`` with 0 <= start < stop <= size
softmax_lastdim       any shape with ndim >= 1
layer_norm            x [..., d], gamma [d], beta [d]
gelu / relu           any shape
embedding_lookup      table [V, d]; attrs ``ids`` integer array with values in [0, V)
l1_loss               pred and target of identical shape; returns a scalar
l2_normalize_lastdim  any shape with ndim >= 1
"""
import enum
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

from src.exceptions import NotScalarError, ShapeError, UnknownOpError


EPS = 1e-8
GELU_C = math.sqrt(2.0 / math.pi)


class OpKind(str, enum.Enum):
    """Differentiable op kinds understood by ``apply``."""
    MATMUL = "matmul"
    ADD = "add"
    SUB = "sub"
    MUL = "mul_elementwise"
    SCALE = "scale"
    MEAN = "mean"
    SUM = "sum"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    CONCAT = "concat"
    SLICE = "slice"
    SOFTMAX = "softmax_lastdim"
    LAYER_NORM = "layer_norm"
    GELU = "gelu"
    RELU = "relu"
    EMBEDDING = "embedding_lookup"
    L1_LOSS = "l1_loss"
    L2_NORMALIZE = "l2_normalize_lastdim"


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """Whether ops on this thread record a backward graph."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


@dataclass
class Node:
    """Backward record attached to a computed tensor."""
    op: OpKind
    parents: tuple["Tensor", ...]
    saved: dict[str, Any] = field(default_factory=dict)
    attrs: dict[str, Any] = field(default_factory=dict)


class Tensor:
    """
    n-dimensional float64 array with an optional gradient and backward record.

    Scalars have shape ``()``. Construction always copies ``data``.
    """

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError("tensor", array.shape, detail="dimensions must be positive")
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array, dtype=np.float64)
        out.grad = None
        out.requires_grad = requires_grad
        out.node = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise NotScalarError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # --- operator sugar ---
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply(OpKind.MATMUL, [self, other])

    def __add__(self, other: "Tensor") -> "Tensor":
        return apply(OpKind.ADD, [self, _as_tensor(other)])

    def __sub__(self, other: "Tensor") -> "Tensor":
        return apply(OpKind.SUB, [self, _as_tensor(other)])

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, (int, float)):
            return apply(OpKind.SCALE, [self], {"factor": float(other)})
        return apply(OpKind.MUL, [self, _as_tensor(other)])

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return apply(OpKind.SCALE, [self], {"factor": -1.0})

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"


def _as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# Op registry
# ---------------------------------------------------------------------------

Forward = Callable[[list[np.ndarray], dict[str, Any]], tuple[np.ndarray, dict[str, Any]]]
Backward = Callable[
    [np.ndarray, list[np.ndarray], np.ndarray, dict[str, Any], dict[str, Any]],
    list[Optional[np.ndarray]],
]
Check = Callable[[list[np.ndarray], dict[str, Any]], None]


@dataclass(frozen=True)
class _OpDef:
    arity: Optional[int]
    check: Check
    forward: Forward
    backward: Backward


_OPS: dict[OpKind, _OpDef] = {}


def _register(kind: OpKind, arity: Optional[int], check: Check, forward: Forward, backward: Backward) -> None:
    _OPS[kind] = _OpDef(arity, check, forward, backward)


def _no_check(xs: list[np.ndarray], attrs: dict[str, Any]) -> None:
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _normalize_axes(axis: Any, ndim: int, op: str, shape: tuple[int, ...]) -> Optional[tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(op, shape, detail=f"axis {a} out of range")
        out.append(int(a) % ndim)
    return tuple(sorted(set(out)))


# --- matmul ---
def _matmul_check(xs: list[np.ndarray], attrs: dict[str, Any]) -> None:
    a, b = xs
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    if ok and b.ndim > 2:
        ok = a.shape[:-2] == b.shape[:-2]
    if not ok:
        raise ShapeError(OpKind.MATMUL.value, a.shape, b.shape)


def _matmul_fwd(xs, attrs):
    return xs[0] @ xs[1], {}


def _matmul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return [ga, gb]


# --- elementwise binary ---
def _broadcast_check(kind: OpKind) -> Check:
    def check(xs: list[np.ndarray], attrs: dict[str, Any]) -> None:
        try:
            np.broadcast_shapes(xs[0].shape, xs[1].shape)
        except ValueError:
            raise ShapeError(kind.value, xs[0].shape, xs[1].shape) from None
    return check


def _add_fwd(xs, attrs):
    return xs[0] + xs[1], {}


def _add_bwd(g, xs, out, saved, attrs):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


def _sub_fwd(xs, attrs):
    return xs[0] - xs[1], {}


def _sub_bwd(g, xs, out, saved, attrs):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]


def _mul_fwd(xs, attrs):
    return xs[0] * xs[1], {}


def _mul_bwd(g, xs, out, saved, attrs):
    return [_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)]


# --- scale ---
def _scale_check(xs, attrs):
    if "factor" not in attrs:
        raise ShapeError(OpKind.SCALE.value, xs[0].shape, detail="missing 'factor'")


def _scale_fwd(xs, attrs):
    return xs[0] * float(attrs["factor"]), {}


def _scale_bwd(g, xs, out, saved, attrs):
    return [g * float(attrs["factor"])]


# --- reductions ---
def _reduce_check(kind: OpKind) -> Check:
    def check(xs, attrs):
        attrs["axis"] = _normalize_axes(attrs.get("axis"), xs[0].ndim, kind.value, xs[0].shape)
        attrs["keepdims"] = bool(attrs.get("keepdims", False))
    return check


def _sum_fwd(xs, attrs):
    return np.sum(xs[0], axis=attrs["axis"], keepdims=attrs["keepdims"]), {}


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], attrs: dict[str, Any]) -> np.ndarray:
    axis = attrs["axis"]
    if axis is not None and not attrs["keepdims"]:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _sum_bwd(g, xs, out, saved, attrs):
    return [_expand_reduced(g, xs[0].shape, attrs)]


def _mean_fwd(xs, attrs):
    return np.mean(xs[0], axis=attrs["axis"], keepdims=attrs["keepdims"]), {}


def _mean_bwd(g, xs, out, saved, attrs):
    x = xs[0]
    axis = attrs["axis"]
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in axis]))
    return [_expand_reduced(g, x.shape, attrs) / count]


# --- transpose / reshape ---
def _transpose_check(xs, attrs):
    x = xs[0]
    axes = attrs.get("axes")
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(OpKind.TRANSPOSE.value, x.shape, detail="needs ndim >= 2")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(OpKind.TRANSPOSE.value, x.shape, detail=f"bad permutation {axes}")
    attrs["axes"] = axes


def _transpose_fwd(xs, attrs):
    return np.transpose(xs[0], attrs["axes"]), {}


def _transpose_bwd(g, xs, out, saved, attrs):
    return [np.transpose(g, np.argsort(attrs["axes"]))]


def _reshape_check(xs, attrs):
    x = xs[0]
    shape = [int(s) for s in attrs.get("shape", ())]
    unknown = [i for i, s in enumerate(shape) if s == -1]
    known = int(np.prod([s for s in shape if s != -1]))
    if len(unknown) > 1 or any(s == 0 or s < -1 for s in shape) or known == 0:
        raise ShapeError(OpKind.RESHAPE.value, x.shape, tuple(shape))
    if unknown:
        if x.size % known:
            raise ShapeError(OpKind.RESHAPE.value, x.shape, tuple(shape))
        shape[unknown[0]] = x.size // known
    if int(np.prod(shape)) != x.size:
        raise ShapeError(OpKind.RESHAPE.value, x.shape, tuple(shape))
    attrs["shape"] = tuple(shape)


def _reshape_fwd(xs, attrs):
    return xs[0].reshape(attrs["shape"]), {}


def _reshape_bwd(g, xs, out, saved, attrs):
    return [g.reshape(xs[0].shape)]


# --- concat / slice ---
def _concat_check(xs, attrs):
    if not xs:
        raise ShapeError(OpKind.CONCAT.value, detail="no inputs")
    first = xs[0]
    axis = int(attrs.get("axis", 0))
    if not -first.ndim <= axis < first.ndim:
        raise ShapeError(OpKind.CONCAT.value, first.shape, detail=f"axis {axis} out of range")
    axis %= first.ndim
    for x in xs[1:]:
        other = [d for i, d in enumerate(x.shape) if i != axis]
        mine = [d for i, d in enumerate(first.shape) if i != axis]
        if x.ndim != first.ndim or other != mine:
            raise ShapeError(OpKind.CONCAT.value, first.shape, x.shape, detail=f"axis={axis}")
    attrs["axis"] = axis


def _concat_fwd(xs, attrs):
    return np.concatenate(xs, axis=attrs["axis"]), {}


def _concat_bwd(g, xs, out, saved, attrs):
    axis = attrs["axis"]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return list(np.split(g, bounds, axis=axis))


def _slice_check(xs, attrs):
    x = xs[0]
    axis = int(attrs.get("axis", 0))
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(OpKind.SLICE.value, x.shape, detail=f"axis {axis} out of range")
    axis %= x.ndim
    start, stop = int(attrs.get("start", 0)), int(attrs.get("stop", x.shape[axis]))
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(OpKind.SLICE.value, x.shape, detail=f"bad range [{start}, {stop}) on axis {axis}")
    attrs.update(axis=axis, start=start, stop=stop)


def _slice_index(ndim: int, attrs: dict[str, Any]) -> tuple:
    index: list[Any] = [slice(None)] * ndim
    index[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
    return tuple(index)


def _slice_fwd(xs, attrs):
    return xs[0][_slice_index(xs[0].ndim, attrs)].copy(), {}


def _slice_bwd(g, xs, out, saved, attrs):
    full = np.zeros_like(xs[0])
    full[_slice_index(xs[0].ndim, attrs)] = g
    return [full]


# --- softmax / normalisation ---
def _needs_lastdim(kind: OpKind) -> Check:
    def check(xs, attrs):
        if xs[0].ndim < 1:
            raise ShapeError(kind.value, xs[0].shape, detail="needs ndim >= 1")
    return check


def _softmax_fwd(xs, attrs):
    x = xs[0]
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True), {}


def _softmax_bwd(g, xs, out, saved, attrs):
    return [out * (g - np.sum(g * out, axis=-1, keepdims=True))]


def _layer_norm_check(xs, attrs):
    x, gamma, beta = xs
    if x.ndim < 1 or gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(OpKind.LAYER_NORM.value, x.shape, gamma.shape, beta.shape)


def _layer_norm_fwd(xs, attrs):
    x, gamma, beta = xs
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, {"xhat": xhat, "inv": inv}


def _layer_norm_bwd(g, xs, out, saved, attrs):
    x, gamma, _ = xs
    xhat, inv = saved["xhat"], saved["inv"]
    gxhat = g * gamma
    gx = inv * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True)
    )
    lead = tuple(range(x.ndim - 1))
    return [gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)]


def _l2n_fwd(xs, attrs):
    x = xs[0]
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    denom = np.maximum(norm, EPS)
    return x / denom, {"norm": norm, "denom": denom}


def _l2n_bwd(g, xs, out, saved, attrs):
    norm, denom = saved["norm"], saved["denom"]
    projected = g - out * np.sum(g * out, axis=-1, keepdims=True)
    return [np.where(norm > EPS, projected, g) / denom]


# --- activations ---
def _gelu_fwd(xs, attrs):
    x = xs[0]
    t = np.tanh(GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), {"t": t}


def _gelu_bwd(g, xs, out, saved, attrs):
    x, t = xs[0], saved["t"]
    du = GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
    return [g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)]


def _relu_fwd(xs, attrs):
    return np.maximum(xs[0], 0.0), {}


def _relu_bwd(g, xs, out, saved, attrs):
    return [g * (xs[0] > 0)]


# --- embedding ---
def _embedding_check(xs, attrs):
    table = xs[0]
    if table.ndim != 2:
        raise ShapeError(OpKind.EMBEDDING.value, table.shape, detail="table must be [vocab, d]")
    ids = np.asarray(attrs.get("ids"))
    if ids.size == 0 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(OpKind.EMBEDDING.value, table.shape, ids.shape, detail="ids must be integers")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(
            OpKind.EMBEDDING.value,
            table.shape,
            ids.shape,
            detail=f"id {int(ids.max()) if ids.max() >= table.shape[0] else int(ids.min())} "
            f"outside vocabulary of {table.shape[0]}",
        )
    attrs["ids"] = ids.astype(np.int64)


def _embedding_fwd(xs, attrs):
    return xs[0][attrs["ids"]], {}


def _embedding_bwd(g, xs, out, saved, attrs):
    full = np.zeros_like(xs[0])
    np.add.at(full, attrs["ids"], g)
    return [full]


# --- losses ---
def _l1_check(xs, attrs):
    if xs[0].shape != xs[1].shape:
        raise ShapeError(OpKind.L1_LOSS.value, xs[0].shape, xs[1].shape)


def _l1_fwd(xs, attrs):
    diff = xs[0] - xs[1]
    return np.array(np.mean(np.abs(diff))), {"sign": np.sign(diff) / diff.size}


def _l1_bwd(g, xs, out, saved, attrs):
    s = saved["sign"] * g
    return [s, -s]


_register(OpKind.MATMUL, 2, _matmul_check, _matmul_fwd, _matmul_bwd)
_register(OpKind.ADD, 2, _broadcast_check(OpKind.ADD), _add_fwd, _add_bwd)
_register(OpKind.SUB, 2, _broadcast_check(OpKind.SUB), _sub_fwd, _sub_bwd)
_register(OpKind.MUL, 2, _broadcast_check(OpKind.MUL), _mul_fwd, _mul_bwd)
_register(OpKind.SCALE, 1, _scale_check, _scale_fwd, _scale_bwd)
_register(OpKind.MEAN, 1, _reduce_check(OpKind.MEAN), _mean_fwd, _mean_bwd)
_register(OpKind.SUM, 1, _reduce_check(OpKind.SUM), _sum_fwd, _sum_bwd)
_register(OpKind.TRANSPOSE, 1, _transpose_check, _transpose_fwd, _transpose_bwd)
_register(OpKind.RESHAPE, 1, _reshape_check, _reshape_fwd, _reshape_bwd)
_register(OpKind.CONCAT, None, _concat_check, _concat_fwd, _concat_bwd)
_register(OpKind.SLICE, 1, _slice_check, _slice_fwd, _slice_bwd)
_register(OpKind.SOFTMAX, 1, _needs_lastdim(OpKind.SOFTMAX), _softmax_fwd, _softmax_bwd)
_register(OpKind.LAYER_NORM, 3, _layer_norm_check, _layer_norm_fwd, _layer_norm_bwd)
_register(OpKind.GELU, 1, _no_check, _gelu_fwd, _gelu_bwd)
_register(OpKind.RELU, 1, _no_check, _relu_fwd, _relu_bwd)
_register(OpKind.EMBEDDING, 1, _embedding_check, _embedding_fwd, _embedding_bwd)
_register(OpKind.L1_LOSS, 2, _l1_check, _l1_fwd, _l1_bwd)
_register(OpKind.L2_NORMALIZE, 1, _needs_lastdim(OpKind.L2_NORMALIZE), _l2n_fwd, _l2n_bwd)


def _resolve(op_kind: OpKind | str) -> OpKind:
    try:
        return OpKind(op_kind)
    except ValueError:
        raise UnknownOpError(f"unknown op kind: {op_kind!r}") from None


def apply(
    op_kind: OpKind | str,
    inputs: Sequence[Tensor],
    attrs: Optional[dict[str, Any]] = None,
) -> Tensor:
    """
    Apply a registered op.

    Args:
        op_kind: One of ``OpKind`` (or its string value)
        inputs: Input tensors
        attrs: Op attributes (see module docstring)

    Returns:
        New tensor carrying a backward record when any input requires grad
    """
    kind = _resolve(op_kind)
    op = _OPS[kind]
    if op.arity is not None and len(inputs) != op.arity:
        raise ShapeError(kind.value, *(t.shape for t in inputs), detail=f"expects {op.arity} inputs")
    resolved_attrs = dict(attrs or {})
    arrays = [t.data for t in inputs]
    op.check(arrays, resolved_attrs)
    data, saved = op.forward(arrays, resolved_attrs)

    track = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=track)
    if track:
        out.node = Node(kind, tuple(inputs), saved, resolved_attrs)
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients add into existing ``grad`` buffers; the graph is freed afterwards.
    """
    if loss.size != 1:
        raise NotScalarError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for tensor in reversed(order):
        g = pending.pop(id(tensor), None)
        if g is None:
            continue
        tensor.grad = np.array(g) if tensor.grad is None else tensor.grad + g
        node = tensor.node
        if node is None:
            continue
        parent_grads = _OPS[node.op].backward(
            g, [p.data for p in node.parents], tensor.data, node.saved, node.attrs
        )
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = np.array(pg) if key not in pending else pending[key] + pg

    for tensor in order:
        tensor.node = None
