"""Minimal differentiable numeric core.

A reverse-mode tape over numpy arrays, providing exactly the operations
the translation model and the context-enhancement loss need. Correctness
is anchored by ``grad_check``: every differentiable operation must match
central finite differences.

Conventions:
  - values are float32 or float64 numpy arrays (float64 in tests),
  - non-finite values raise ``NumericError`` at construction time,
  - boolean masks are plain numpy arrays, never Tensors,
  - masked softmax / pooling exclude masked positions exactly (weight 0),
    so mask-invariance holds bitwise at 64-bit.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    BatchTooSmallError,
    DegenerateInputError,
    NumericError,
    ShapeError,
)

_FLOATS = (np.float32, np.float64)


def _as_float_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype not in _FLOATS:
        arr = arr.astype(np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense n-dimensional array with an optional gradient.

    ``grad`` is populated by ``backward()`` on every tensor in the graph
    that requires a gradient; it always matches ``values`` in shape.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        arr = _as_float_array(values)
        if not np.isfinite(arr).all():
            raise NumericError("non-finite values in tensor")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded tape."""
        if self.values.size != 1:
            raise NumericError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(values: np.ndarray, parents: tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.dtype)
        out_values = a.values + const

        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))

        return _result(out_values, (a,), backward)

    out_values = a.values + b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out_values, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.dtype)
        out_values = a.values * const

        def backward(g):
            _accumulate(a, _unbroadcast(g * const, a.shape))

        return _result(out_values, (a,), backward)

    out_values = a.values * b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _result(out_values, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / np.asarray(b, dtype=a.dtype))
    out_values = a.values / b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.values, a.shape))
        _accumulate(b, _unbroadcast(-g * a.values / (b.values * b.values), b.shape))

    return _result(out_values, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out_values = a.values ** p

    def backward(g):
        _accumulate(a, g * p * a.values ** (p - 1.0))

    return _result(out_values, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_values = np.sqrt(a.values)

    def backward(g):
        _accumulate(a, g * 0.5 / out_values)

    return _result(out_values, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_values = np.maximum(a.values, 0.0)

    def backward(g):
        _accumulate(a, g * (a.values > 0))

    return _result(out_values, (a,), backward)


# -- shape ------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out_values = a.values.reshape(shape)
    in_shape = a.shape

    def backward(g):
        _accumulate(a, g.reshape(in_shape))

    return _result(out_values, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.values.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_values = np.transpose(a.values, axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _result(out_values, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_values = a.values.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, in_shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, in_shape).copy())

    return _result(out_values, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.values.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def diagonal(a: Tensor) -> Tensor:
    if a.values.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diagonal expects a square matrix, got {a.shape}")
    out_values = np.diagonal(a.values).copy()
    n = a.shape[0]

    def backward(g):
        full = np.zeros_like(a.values)
        full[np.arange(n), np.arange(n)] = g
        _accumulate(a, full)

    return _result(out_values, (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or batched product of 3-D tensors."""
    av, bv = a.values, b.values
    if av.ndim != bv.ndim or av.ndim not in (2, 3):
        raise ShapeError(f"matmul expects two 2-D or two 3-D tensors, got {a.shape} and {b.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if av.ndim == 3 and av.shape[0] != bv.shape[0]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    out_values = av @ bv

    def backward(g):
        _accumulate(a, g @ bv.swapaxes(-1, -2))
        _accumulate(b, av.swapaxes(-1, -2) @ g)

    return _result(out_values, (a, b), backward)


# -- softmax family -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtraction)."""
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out_values = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_values).sum(axis=axis, keepdims=True)
        _accumulate(a, out_values * (g - inner))

    return _result(out_values, (a,), backward)


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where positions with ``mask == False`` get exactly zero weight.

    ``mask`` is a boolean array broadcastable to ``a.shape``. Rows with no
    valid position raise ``DegenerateInputError``.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=axis).all():
        raise DegenerateInputError("masked_softmax: a row has no unmasked position")
    scores = np.where(mask, a.values, -np.inf)
    shifted = scores - scores.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out_values = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_values).sum(axis=axis, keepdims=True)
        _accumulate(a, out_values * (g - inner))

    return _result(out_values, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_values = shifted - log_norm
    soft = np.exp(out_values)

    def backward(g):
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _result(out_values, (a,), backward)


# -- normalization -------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise NumericError("layer_norm requires eps > 0")
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out_values = xhat * gain.values + bias.values

    def backward(g):
        gx = g * gain.values
        term = gx - gx.mean(axis=-1, keepdims=True) \
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, term * inv)
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))

    return _result(out_values, (x, gain, bias), backward)


def batch_norm_train(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each column of a (B, d) batch with population statistics.

    No affine parameters, no running averages: outputs feed a loss directly
    and are never used at inference time.
    """
    if eps <= 0:
        raise NumericError("batch_norm_train requires eps > 0")
    if x.values.ndim != 2:
        raise ShapeError(f"batch_norm_train expects a (B, d) matrix, got {x.shape}")
    B = x.shape[0]
    if B < 2:
        raise BatchTooSmallError(f"batch_norm_train requires B >= 2, got B={B}")
    mu = x.values.mean(axis=0, keepdims=True)
    var = x.values.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out_values = xhat

    def backward(g):
        term = g - g.mean(axis=0, keepdims=True) \
            - xhat * (g * xhat).mean(axis=0, keepdims=True)
        _accumulate(x, term * inv)

    return _result(out_values, (x,), backward)


# -- lookup / gather ------------------------------------------------------------


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V, n) by integer ids; gradients scatter-add."""
    ids = np.asarray(ids)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding id out of range [0, {V}): min={ids.min()}, max={ids.max()}")
    out_values = table.values[ids]

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.values)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return _result(out_values, (table,), backward)


def take_along_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading index: out[..., ] = x[..., ids]."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"take_along_last ids shape {ids.shape} must match leading dims of {x.shape}")
    V = x.shape[-1]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"take_along_last index out of range [0, {V})")
    out_values = np.take_along_axis(x.values, ids[..., None], axis=-1)[..., 0]
    lead_idx = np.indices(ids.shape)

    def backward(g):
        full = np.zeros_like(x.values)
        np.add.at(full, (*lead_idx, ids), g)
        _accumulate(x, full)

    return _result(out_values, (x,), backward)


# -- mask-aware pooling ----------------------------------------------------------


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over unmasked time steps: (B, t, h) with mask (B, t) -> (B, h)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"pool mask shape {mask.shape} must match {x.shape[:2]}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise DegenerateInputError("mean pool: a row has no unmasked position")
    m = mask[..., None].astype(x.dtype)
    out_values = (x.values * m).sum(axis=1) / counts[:, None]

    def backward(g):
        _accumulate(x, m * (g / counts[:, None])[:, None, :])

    return _result(out_values, (x,), backward)


def masked_max_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise max over unmasked time steps; ties go to the earliest step."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"pool mask shape {mask.shape} must match {x.shape[:2]}")
    if (~mask.any(axis=1)).any():
        raise DegenerateInputError("max pool: a row has no unmasked position")
    guarded = np.where(mask[..., None], x.values, -np.inf)
    arg = guarded.argmax(axis=1)
    B, _, H = x.shape
    bi = np.arange(B)[:, None]
    hi = np.arange(H)[None, :]
    out_values = x.values[bi, arg, hi]

    def backward(g):
        full = np.zeros_like(x.values)
        np.add.at(full, (bi, arg, hi), g)
        _accumulate(x, full)

    return _result(out_values, (x,), backward)


# -- gradient checking --------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    Returns the max over all coordinates of
    ``|analytic - central| / max(1, |central|)``.
    """
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.values.size != 1:
        raise NumericError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(*inputs).item()
            flat[i] = orig - eps
            f_minus = f(*inputs).item()
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ana_flat[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
