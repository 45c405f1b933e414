"""Dense f64 tensors with reverse-mode automatic differentiation.

Storage and elementwise/BLAS kernels are numpy; the graph bookkeeping is
ours. Every operation runs eagerly and, when any input is tracked, records
a backward closure. ``loss.backward()`` walks the recorded graph in reverse
creation order (a valid reverse topological order, since parents are always
created before children) and accumulates gradients on tracked leaves.

Conventions:
  * everything is float64; finiteness is enforced on creation and on every
    op result (a NaN/Inf is an error state, not a value),
  * broadcasting follows numpy rules but is only relied on for the shapes
    the model math needs (bias rows, per-channel gates, mask columns),
  * tensors are immutable after creation except for ``grad`` accumulation
    and explicit in-place parameter updates between steps (optimizer).
"""

from __future__ import annotations

import itertools
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "ValidationError",
    "concat",
    "cross_entropy_soft",
    "layer_norm",
    "matmul",
    "softmax",
    "xavier",
]


def xavier(rng, shape) -> "np.ndarray":
    """Fan-balanced normal init for 2-D projection weights."""
    fan_in, fan_out = shape[0], shape[-1]
    std = float(np.sqrt(2.0 / (fan_in + fan_out)))
    return rng.normal(0.0, std, shape)


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError):
    """Operand shapes do not satisfy an operation's contract."""


class GraphError(TensorError):
    """Misuse of the autodiff graph (e.g. backward on a non-scalar)."""


class NonFiniteError(TensorError):
    """A NaN or Inf entered the computation."""


class ValidationError(TensorError):
    """Input fails a value-level precondition (e.g. non-normalized dist)."""


_ids = itertools.count(1)

# Toggled off only in benchmarks; tests run with the check on.
CHECK_FINITE = True


def _check_finite(arr: np.ndarray, where: str) -> None:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """N-dimensional f64 value with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_nid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._nid = next(_ids)

    # -- construction helpers ------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        t = cls.__new__(cls)
        _check_finite(data, op)
        t.data = data
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        if t.requires_grad:
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        t._nid = next(_ids)
        return t

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    def detach(self) -> "Tensor":
        """A new untracked leaf viewing the same values."""
        return Tensor(self.data)

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- backward --------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from self.

        Repeated calls accumulate; zero with ``zero_grad()``. Only scalars
        may seed a backward pass.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        grads: dict[int, np.ndarray] = {self._nid: np.ones_like(self.data)}
        if not self.requires_grad:
            return
        # Reverse creation order is a reverse topological order: every
        # parent has a smaller id than its children.
        nodes: list[Tensor] = []
        seen = {self._nid}
        stack = [self]
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t._parents:
                if p.requires_grad and p._nid not in seen:
                    seen.add(p._nid)
                    stack.append(p)
        nodes.sort(key=lambda t: t._nid, reverse=True)
        for t in nodes:
            g = grads.pop(t._nid, None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g if t.grad is None else t.grad + g
            else:
                t._backward(g, grads)

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # method forms used throughout the model code
    def matmul(self, other):
        return matmul(self, other)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def rows(self, start, stop):
        return narrow(self, 0, start, stop - start)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(grads: dict, parent: Tensor, g: np.ndarray) -> None:
    if parent.requires_grad:
        nid = parent._nid
        if nid in grads:
            grads[nid] = grads[nid] + g
        else:
            grads[nid] = g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(g, b.data.shape))

    return Tensor._result(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g, grads):
        _accum(grads, a, _unbroadcast(g * b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g, grads):
        _accum(grads, a, _unbroadcast(g / b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g, grads):
        _accum(grads, x, g * out)

    return Tensor._result(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g, grads):
        _accum(grads, x, g / x.data)

    return Tensor._result(out, (x,), backward, "log")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g, grads):
        _accum(grads, x, g * (x.data > 0.0))

    return Tensor._result(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500.0, 500.0)))

    def backward(g, grads):
        _accum(grads, x, g * out * (1.0 - out))

    return Tensor._result(out, (x,), backward, "sigmoid")


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x), the SiLU gate."""
    return mul(x, sigmoid(x))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit: 0.5 x (1 + erf(x / sqrt(2)))."""
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = x.data * cdf

    def backward(g, grads):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        _accum(grads, x, g * (cdf + x.data * pdf))

    return Tensor._result(out, (x,), backward, "gelu")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g, grads):
        _accum(grads, x, g / (2.0 * out))

    return Tensor._result(out, (x,), backward, "sqrt")


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x) computed stably as max(x,0) + log1p(e^-|x|)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def backward(g, grads):
        s = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500.0, 500.0)))
        _accum(grads, x, g * s)

    return Tensor._result(out, (x,), backward, "softplus")


# -- shape ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product with gradients for both operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g, grads):
        _accum(grads, a, g @ b.data.T)
        _accum(grads, b, a.data.T @ g)

    return Tensor._result(out, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {x.shape}")
    out = x.data.T.copy()

    def backward(g, grads):
        _accum(grads, x, g.T)

    return Tensor._result(out, (x,), backward, "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape).copy()

    def backward(g, grads):
        _accum(grads, x, g.reshape(x.data.shape))

    return Tensor._result(out, (x,), backward, "reshape")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, grads):
        if axis is None:
            gg = np.broadcast_to(g, x.data.shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            gg = np.broadcast_to(g, x.data.shape)
        _accum(grads, x, np.ascontiguousarray(gg))

    return Tensor._result(np.asarray(out), (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g, grads):
        offset = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            _accum(grads, p, np.ascontiguousarray(g[tuple(sl)]))
            offset += s

    return Tensor._result(out, tuple(parts), backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = x.data[sl].copy()

    def backward(g, grads):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accum(grads, x, full)

    return Tensor._result(out, (x,), backward, "narrow")


def gather_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    out = x.data[idx].copy()

    def backward(g, grads):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(grads, x, full)

    return Tensor._result(out, (x,), backward, "gather_rows")


# -- model-math primitives -----------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Probability vectors along ``axis``, max-subtracted for stability."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g, grads):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(grads, x, (g - dot) * out)

    return Tensor._result(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValidationError("layer_norm eps must be > 0")
    gamma, beta = _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = gamma.data * xh + beta.data

    def backward(g, grads):
        n = x.data.shape[-1]
        _accum(grads, gamma, _unbroadcast(g * xh, gamma.data.shape))
        _accum(grads, beta, _unbroadcast(g, beta.data.shape))
        dxh = g * gamma.data
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                    - xh * (dxh * xh).mean(axis=-1, keepdims=True))
        _accum(grads, x, dx)

    return Tensor._result(out, (x, gamma, beta), backward, "layer_norm")


LOG_FLOOR_EPS = 1e-12
_NORMALIZATION_TOL = 1e-6


def cross_entropy_soft(p_target: Tensor, p_pred: Tensor, validate: bool = True) -> Tensor:
    """-sum(p_target * log(p_pred)) over the last axis, mean over rows.

    Both inputs must be probability vectors over the same support; the
    prediction is floored at ``LOG_FLOOR_EPS`` before the log. Gradients
    are defined for both sides (the target side matters when distilling
    through soft targets that are themselves in the graph).
    """
    p_target, p_pred = _as_tensor(p_target), _as_tensor(p_pred)
    if p_target.data.shape != p_pred.data.shape:
        raise ShapeError(
            f"cross_entropy_soft supports differ: {p_target.shape} vs {p_pred.shape}")
    if validate:
        for name, arr in (("p_target", p_target.data), ("p_pred", p_pred.data)):
            sums = arr.sum(axis=-1)
            if np.abs(sums - 1.0).max() > _NORMALIZATION_TOL:
                raise ValidationError(
                    f"{name} rows are not normalized (max |sum-1| = "
                    f"{np.abs(sums - 1.0).max():.3g})")
    floored = np.maximum(p_pred.data, LOG_FLOOR_EPS)
    logp = np.log(floored)
    per_row = -(p_target.data * logp).sum(axis=-1)
    n_rows = max(per_row.size, 1)
    out = np.asarray(per_row.sum() / n_rows)

    def backward(g, grads):
        scale = float(g) / n_rows
        live = p_pred.data > LOG_FLOOR_EPS
        _accum(grads, p_pred, -scale * np.where(live, p_target.data / floored, 0.0))
        _accum(grads, p_target, -scale * logp)

    return Tensor._result(out, (p_target, p_pred), backward, "cross_entropy_soft")
