"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node graph as it executes; calling
:func:`backward` on a scalar result replays the recorded operations in
reverse topological order and accumulates gradients additively into every
tensor that `requires_grad`. The graph is rebuilt on every forward pass, so
data-dependent control flow (top-k routing, capacity drops, random masks)
needs no special handling.

Shape discipline is deliberately strict: binary operations accept equal
shapes, or a right operand whose shape matches the trailing dimensions of
the left one (the bias / per-row broadcast pattern). Anything else raises
:class:`ShapeError` naming the offending dimensions.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "zeros",
    "backward",
    "add",
    "add_scalar",
    "mul",
    "mul_scalar",
    "matmul",
    "softmax",
    "sigmoid",
    "gelu",
    "layer_norm",
    "embedding_lookup",
    "concat",
    "slice_axis",
    "masked_zero",
    "scale_rows",
    "gather_rows",
    "scatter_rows",
    "gather_elements",
    "normalize_rows",
    "reshape",
    "swapaxes",
    "sum_all",
    "mean_all",
    "mean_axis",
    "absolute",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """An n-dimensional float64 value with an optional gradient buffer.

    `data` is always a C-contiguous float64 ndarray. `grad`, when populated
    by :func:`backward`, has the same shape. Tensors produced by recorded
    operations keep references to their inputs and a backward rule; leaves
    have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_inputs", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._inputs: tuple[Tensor, ...] | None = None
        self._backward_fn = None

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar: scalars route to the *_scalar ops, tensors to the
    # strict-shape ops.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Attach a backward rule to `out` if recording is active."""
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._backward_fn = backward_fn
    return out


class Tape:
    """Ordered record of the operations that produced a tensor.

    `nodes` lists every tensor reachable from the traced result in
    topological order (inputs before consumers), so iterating it in reverse
    visits the graph in reverse topological order. Gradients accumulate
    additively wherever a tensor fans out into several consumers.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, result: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(result, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._inputs is not None:
                for parent in node._inputs:
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def backward(self, result: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(result): np.ones_like(result.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            input_grads = node._backward_fn(g)
            for parent, pg in zip(node._inputs, input_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> None:
    """Populate gradients of every `requires_grad` tensor feeding `loss`.

    `loss` must be a scalar (shape () or a single element).
    """
    if loss.data.size != 1:
        raise ValueError(
            f"backward requires a scalar loss, got shape {loss.shape}"
        )
    Tape.trace(loss).backward(loss)


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------


def _check_trailing(a: Tensor, b: Tensor, opname: str) -> bool:
    """Equal shapes, or b matches a's trailing dims (returns True if b must
    be broadcast over a's leading axes)."""
    if a.shape == b.shape:
        return False
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return True
    raise ShapeError(
        f"{opname}: shapes {a.shape} and {b.shape} do not conform "
        "(equal shapes or trailing-dimension broadcast only)"
    )


def _reduce_leading(g: np.ndarray, target_shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(target_shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_trailing(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        gb = _reduce_leading(g, b.shape) if broadcast else g
        return g, gb

    return _record(out, (a, b), backward_fn)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c)
    return _record(out, (a,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_trailing(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward_fn(g):
        ga = g * b.data
        gb = g * a.data
        if broadcast:
            gb = _reduce_leading(gb, b.shape)
        return ga, gb

    return _record(out, (a, b), backward_fn)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-D @ 2-D, n-D @ 2-D (shared weight applied
    to every leading batch), and stacked n-D @ n-D with equal leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ: {a.shape} @ {b.shape}"
        )
    if bd.ndim == 2:
        out = Tensor(ad @ bd)

        def backward_fn(g):
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _record(out, (a, b), backward_fn)
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(
            f"matmul: leading batch dimensions differ: {a.shape} @ {b.shape}"
        )
    out = Tensor(ad @ bd)

    def backward_fn(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return ga, gb

    return _record(out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis; rows sum to 1."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    xd = x.data
    x_sq = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x_sq))
    out = Tensor(0.5 * xd * (1.0 + t))

    def backward_fn(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * _GELU_C * xd * sech2 * (1.0 + 3 * 0.044715 * x_sq)
        return (g * d,)

    return _record(out, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} "
            f"do not match feature dimension {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(xhat * gain.data + bias.data)

    def backward_fn(g):
        gxhat = g * gain.data
        mean_g = gxhat.mean(axis=-1, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv_std * (gxhat - mean_g - xhat * mean_gx)
        axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=axes)
        gbias = g.sum(axis=axes)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), backward_fn)


# ---------------------------------------------------------------------------
# indexing / structural primitives
# ---------------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` ([V, d]) by an integer id array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}) "
            f"(min={ids.min()}, max={ids.max()})"
        )
    out = Tensor(table.data[ids])

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _record(out, (table,), backward_fn)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(x.data[index])

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _record(out, (x,), backward_fn)


def masked_zero(x: Tensor, row_mask: np.ndarray) -> Tensor:
    """Zero the rows (axis-0 entries) selected by a boolean mask.

    Backward propagates exactly zero gradient into masked rows.
    """
    row_mask = np.asarray(row_mask, dtype=bool)
    if row_mask.shape != (x.shape[0],):
        raise ShapeError(
            f"masked_zero: mask shape {row_mask.shape} does not match "
            f"leading dimension {x.shape[0]}"
        )
    keep = ~row_mask
    keep_col = keep.reshape((-1,) + (1,) * (x.ndim - 1))
    out = Tensor(np.where(keep_col, x.data, 0.0))
    return _record(out, (x,), lambda g: (np.where(keep_col, g, 0.0),))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply each row x[i] of a [T, d] tensor by scalar weight w[i]."""
    if w.ndim != 1 or x.ndim != 2 or w.shape[0] != x.shape[0]:
        raise ShapeError(
            f"scale_rows: expected x [T, d] and w [T], got {x.shape} and {w.shape}"
        )
    wcol = w.data[:, None]
    out = Tensor(x.data * wcol)

    def backward_fn(g):
        return g * wcol, (g * x.data).sum(axis=1)

    return _record(out, (x, w), backward_fn)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of x by integer indices (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), backward_fn)


def scatter_rows(rows: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Scatter-add rows into a zero [num_rows, d] tensor at `idx`."""
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((num_rows,) + rows.shape[1:])
    np.add.at(data, idx, rows.data)
    out = Tensor(data)
    return _record(out, (rows,), lambda g: (g[idx],))


def gather_elements(x: Tensor, row_idx: np.ndarray, col_idx) -> Tensor:
    """Pick elements x[row_idx[i], col_idx[i]] (col_idx may be a scalar)."""
    row_idx = np.asarray(row_idx, dtype=np.intp)
    col_idx = np.broadcast_to(np.asarray(col_idx, dtype=np.intp), row_idx.shape)
    out = Tensor(x.data[row_idx, col_idx])

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (row_idx, col_idx), g)
        return (gx,)

    return _record(out, (x,), backward_fn)


def normalize_rows(x: Tensor) -> Tensor:
    """Divide each row by its sum (rows must have nonzero sum)."""
    s = x.data.sum(axis=-1, keepdims=True)
    y = x.data / s
    out = Tensor(y)

    def backward_fn(g):
        wsum = (g * y).sum(axis=-1, keepdims=True)
        return ((g - wsum) / s,)

    return _record(out, (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.swapaxes(a, b)))
    return _record(out, (x,), lambda g: (g.swapaxes(a, b),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(x.data.mean())
    return _record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _record(out, (x,), backward_fn)


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    out = Tensor(np.abs(x.data))
    return _record(out, (x,), lambda g: (g * np.sign(x.data),))
