"""Reverse-mode autodiff over numpy arrays.

Tensors hold float32 data by default (reductions and normalization
statistics accumulate in float64 before casting back).  Every operation
records its parents and a backward closure; ``Tensor.backward`` walks the
graph once in reverse topological order and accumulates ``.grad`` on the
leaves.  The graph is consumed by the walk: calling backward twice on the
same root is an error, rebuilding the forward pass gives a fresh graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NumericsError(RuntimeError):
    """Raised when an operation produces non-finite values."""


def _as_array(x, like: np.ndarray | None = None) -> np.ndarray:
    if isinstance(x, Tensor):
        raise TypeError("expected raw array-like, got Tensor")
    dtype = like.dtype if like is not None else np.float32
    return np.asarray(x, dtype=dtype)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node of the compute graph: data, grad, parents, backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._spent = False

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph construction ----------------------------------------------

    def _needs_graph(self) -> bool:
        return self.requires_grad or self._backward is not None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.size != 1:
            raise NumericsError("backward requires a scalar root")
        if self._spent:
            raise NumericsError("backward called twice on the same graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None
        self._spent = True

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take_slice(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def relu(self) -> "Tensor":
        return relu(self)

    def gelu(self) -> "Tensor":
        return gelu(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)


def apply_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], tuple],
    op: str = "op",
) -> Tensor:
    """Wrap an op result into the graph.

    ``backward(grad_out)`` must return one gradient (or None) per parent.
    This is the extension point for fused ops defined outside this module.
    """
    data = np.asarray(data)
    _check_finite(data, op)
    out = Tensor(data)
    if any(p._needs_graph() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(_as_array(x, like.data))


# -- elementwise and linear ops -------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op(out, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply_op(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; both operands ndim >= 2."""
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return apply_op(out, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return apply_op(out, (x,), backward, "relu")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * sech2 * dinner),)

    return apply_op(out, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op(out, (x,), backward, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; then scale and shift.

    Statistics are computed in float64 so long rows do not lose mass.
    """
    d = x.data.astype(np.float64)
    mu = d.mean(axis=-1, keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = centered * inv
    xhat = xhat64.astype(x.dtype)
    out = gain.data * xhat + bias.data

    def backward(g):
        n = x.shape[-1]
        gh = (g * gain.data).astype(np.float64)
        s1 = gh.sum(axis=-1, keepdims=True)
        s2 = (gh * xhat64).sum(axis=-1, keepdims=True)
        gx = (inv / n) * (n * gh - s1 - xhat64 * s2)
        ggain = _unbroadcast((g * xhat).astype(np.float64), gain.shape)
        gbias = _unbroadcast(g.astype(np.float64), bias.shape)
        return (
            gx.astype(x.dtype),
            ggain.astype(gain.dtype),
            gbias.astype(bias.dtype),
        )

    return apply_op(out, (x, gain, bias), backward, "layernorm")


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]``; backward scatter-adds into the table."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise NumericsError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise NumericsError("embedding index out of range")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return apply_op(out, (table,), backward, "embedding")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(out, parts, backward, "concat")


def take_slice(x: Tensor, idx) -> Tensor:
    """Basic indexing (ints and slices); backward writes grad into a zero array."""
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return apply_op(np.ascontiguousarray(out), (x,), backward, "slice")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return apply_op(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes) if axes is not None else None

    def backward(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return apply_op(np.ascontiguousarray(out), (x,), backward, "transpose")


# -- reductions and losses --------------------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype),)

    return apply_op(out, (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.shape[a] for a in axis]))
    else:
        count = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.shape).astype(x.dtype),)

    return apply_op(out, (x,), backward, "mean")


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over all elements; sign(0) taken as 0 in backward."""
    target = _coerce(target, pred)
    diff = pred.data - target.data
    out = np.abs(diff).mean(dtype=np.float64).astype(pred.dtype)

    def backward(g):
        s = np.sign(diff) * (g / diff.size)
        return s.astype(pred.dtype), (-s).astype(pred.dtype)

    return apply_op(out, (pred, target), backward, "l1")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = _coerce(target, pred)
    diff = pred.data - target.data
    out = (diff.astype(np.float64) ** 2).mean().astype(pred.dtype)

    def backward(g):
        s = (2.0 / diff.size) * diff * g
        return s.astype(pred.dtype), (-s).astype(pred.dtype)

    return apply_op(out, (pred, target), backward, "l2sq")


# -- gradient checking -------------------------------------------------------


class FiniteDiffReport:
    """Outcome of a finite-difference gradient check."""

    def __init__(self, max_rel_err: float, worst: str, tol: float):
        self.max_rel_err = max_rel_err
        self.worst = worst
        self.tol = tol
        self.passed = max_rel_err <= tol

    def __repr__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"FiniteDiffReport({verdict}, max_rel_err={self.max_rel_err:.3e} at {self.worst})"


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-4,
    analytic: Sequence[np.ndarray] | None = None,
) -> FiniteDiffReport:
    """Compare backward() gradients of the scalar ``f()`` against central differences.

    Parameters are promoted to float64 for the duration so the comparison
    measures the gradient formulas, not float32 storage noise.  ``analytic``
    overrides the backward-pass gradients (used to verify the check itself
    catches planted faults).
    """
    params = list(params)
    originals = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        if analytic is None:
            for p in params:
                p.grad = None
            loss = f()
            loss.backward()
            analytic_grads = []
            for p in params:
                if p.grad is None:
                    analytic_grads.append(np.zeros_like(p.data))
                else:
                    analytic_grads.append(np.asarray(p.grad, dtype=np.float64).copy())
                p.grad = None
        else:
            analytic_grads = [np.asarray(a, dtype=np.float64) for a in analytic]

        max_rel = 0.0
        worst = "-"
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + h
                up = f().data.astype(np.float64).item()
                flat[j] = keep - h
                dn = f().data.astype(np.float64).item()
                flat[j] = keep
                if not (np.isfinite(up) and np.isfinite(dn)):
                    raise NumericsError("objective non-finite at perturbed point")
                numeric = (up - dn) / (2.0 * h)
                a = analytic_grads[pi].reshape(-1)[j]
                scale = max(abs(a), abs(numeric))
                if scale < 1e-9:
                    continue
                rel = abs(a - numeric) / scale
                if rel > max_rel:
                    max_rel = rel
                    worst = f"param[{pi}][{j}]"
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return FiniteDiffReport(max_rel, worst, tol)
