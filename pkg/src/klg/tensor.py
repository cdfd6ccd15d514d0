"""A small reverse-mode automatic differentiation engine over float64 arrays.

Every tensor produced by an operation remembers its parents and a closure
that maps the output gradient to parent gradients.  ``Tensor.backward``
walks the recorded graph in reverse topological order.

Shapes are always explicit.  The only implicit expansion is the row-wise
bias in :func:`add_bias`; everything else must match exactly.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from klg.errors import ContractError, DimensionError, NumericError

LEAKY_SLOPE = 0.2

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording the graph."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic accessors ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every grad-requiring tensor this scalar depends on.

        Gradients accumulate: call :func:`zero_grad` on parameters between steps.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Build a tensor from a hand-written forward value and backward rule.

    ``backward(g)`` receives the output gradient and must return one gradient
    (or ``None``) per parent, each shaped like that parent.
    """
    return _result(np.asarray(data, dtype=np.float64), parents, backward, op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: input contains NaN or infinity")


# -- elementwise arithmetic ------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector to every row of ``x`` along its last axis."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {bias.shape} differ")
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        return g, g.sum(axis=lead) if lead else g

    return _result(x.data + bias.data, (x, bias), backward, "add_bias")


# -- linear algebra --------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product of two matrices."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over identical leading dimensions."""
    if (
        a.ndim < 3
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(np.matmul(a.data, b.data), (a, b), backward, "bmm")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        (a,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(data, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis`` (the last one by default)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    nd = tensors[0].ndim
    ax = axis % nd if nd else 0
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                "concat: shapes " + " and ".join(str(t.shape) for t in tensors) + " disagree"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def getitem(a: Tensor, key) -> Tensor:
    """Basic or advanced numpy indexing; gradients scatter back additively."""

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _result(np.array(a.data[key]), (a,), backward, "getitem")


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows of a matrix; ``index`` may have any shape."""
    idx = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for {table.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _result(table.data[idx], (table,), backward, "take_rows")


def segment_max(x: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Column-wise maximum of the rows of ``x`` belonging to each segment.

    Ties route the gradient to the first maximal row.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    if x.ndim != 2 or seg.shape != (x.shape[0],):
        raise DimensionError(f"segment_max: {x.shape} rows vs {seg.shape} segment ids")
    counts = np.bincount(seg, minlength=n_segments) if seg.size else np.zeros(n_segments, int)
    if len(counts) > n_segments or np.any(counts == 0):
        raise ContractError("segment_max: every segment needs at least one row")
    # stable sort keeps row order inside a segment, so the first maximum wins ties
    order = np.argsort(seg, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    values = x.data[order]
    out = np.maximum.reduceat(values, starts, axis=0)
    d = x.shape[1]
    sorted_seg = seg[order]
    rows = np.arange(len(order))[:, None]
    best = out[sorted_seg]
    # a NaN maximum came from a NaN row; match it so every column has a winner
    hit = (values == best) | (np.isnan(values) & np.isnan(best))
    candidate = np.where(hit, rows, len(order))
    winner = order[np.minimum.reduceat(candidate, starts, axis=0)]

    def backward(g):
        gx = np.zeros_like(x.data)
        cols = np.broadcast_to(np.arange(d), winner.shape)
        np.add.at(gx, (winner.reshape(-1), cols.reshape(-1)), g.reshape(-1))
        return (gx,)

    return _result(out, (x,), backward, "segment_max")


# -- reductions --------------------------------------------------------------
def sum_all(a: Tensor) -> Tensor:
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(
        np.array(a.data.sum() / n), (a,), lambda g: (np.full_like(a.data, g / n),), "mean"
    )


# -- nonlinearities ----------------------------------------------------------
def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def identity(a: Tensor) -> Tensor:
    return a


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """``x`` where ``x >= 0``, else ``slope * x``; the kink takes the positive branch."""
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu: slope must lie in (0, 1), got {slope}")
    factor = np.where(a.data >= 0, 1.0, slope)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row maximum."""
    if a.shape and a.shape[-1] == 0:
        raise ContractError("softmax of an empty row")
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


softmax_row = softmax


def log_softmax(a: Tensor) -> Tensor:
    _check_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(y, (a,), backward, "log_softmax")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is a single row with an integer target, or a batch of rows
    with one target per row; batches are averaged.
    """
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    rows = logits.data.reshape(-1, logits.shape[-1]) if logits.ndim else None
    if rows is None or logits.ndim > 2 or tgt.shape != (rows.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    n = rows.shape[1]
    if np.any(tgt < 0) or np.any(tgt >= n):
        raise IndexError(f"cross_entropy: target out of range for {n} classes")
    _check_finite(rows, "cross_entropy")
    z = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(len(tgt)), tgt]
    b = len(tgt)
    loss = float((lse - picked).sum() / b)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(b), tgt] -= 1.0
        return ((g / b) * p.reshape(logits.shape),)

    return _result(np.array(loss), (logits,), backward, "cross_entropy")


def weighted_nll(logits: Tensor, weights) -> Tensor:
    """``-sum(weights * log_softmax(logits))`` averaged over rows."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != logits.shape:
        raise DimensionError(f"weighted_nll: logits {logits.shape} vs weights {w.shape}")
    logp = log_softmax(logits)
    rows = 1 if logits.ndim == 1 else logits.shape[0]
    return scale(sum_all(mul(logp, Tensor(w))), -1.0 / rows)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True)) + eps
    y = a.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (a,), backward, "l2_normalize")


def outer_sum(left: Tensor, right: Tensor) -> Tensor:
    """``out[..., i, j] = left[..., i] + right[..., j]``."""
    _same_shape(left, right, "outer_sum")
    data = left.data[..., :, None] + right.data[..., None, :]
    return _result(data, (left, right), lambda g: (g.sum(axis=-1), g.sum(axis=-2)), "outer_sum")


# -- parameters and checking ---------------------------------------------------
def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` with respect to ``param``."""
    if step <= 0:
        raise ContractError("step must be positive")
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("function value is not finite")
            gflat[i] = (hi - lo) / (2.0 * step)
    return out


def gradient_errors(
    f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5
) -> list[float]:
    """Worst relative error per parameter between backprop and central differences."""
    zero_grad(params)
    loss = f()
    if not np.isfinite(loss.item()):
        raise NumericError("function value is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errors = []
    for p, ga in zip(params, analytic):
        gn = numeric_gradient(f, p, step)
        denom = np.maximum(1.0, np.maximum(np.abs(ga), np.abs(gn)))
        errors.append(float(np.max(np.abs(ga - gn) / denom)) if ga.size else 0.0)
    zero_grad(params)
    return errors


def grad_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, tol: float = 1e-6
) -> bool:
    """True iff every analytic gradient entry matches central differences within ``tol``."""
    return all(e <= tol for e in gradient_errors(f, params, step))
