"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive used by the ViT model and the training loop
lives here: elementwise arithmetic with broadcasting, (batched) matmul,
activations, softmax, layer/batch normalization, dropout and the
cross-entropy losses.  A ``Tensor`` records the operation that produced it;
``Tensor.backward`` walks the recorded graph in reverse topological order.

Storage defaults to float32.  Wrap gradient checks in ``precision(np.float64)``
so that freshly created tensors use 64-bit storage.  Reductions always
accumulate in float64.
"""

from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError, NonFiniteError, UsageError

# gradient recording is per thread: one graph belongs to one thread
_local = threading.local()
_default_dtype = np.float32
_debug = os.environ.get("VITDERM_DEBUG", "") not in ("", "0")

RRELU_LOWER = 1.0 / 8.0
RRELU_UPPER = 1.0 / 3.0
_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715
CE_EPS = 1e-12


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer steps)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    global _debug
    _debug = bool(flag)


class Tensor:
    """An n-dimensional float array that can take part in an autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if _debug and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient.

        The root must be a scalar.  Gradients accumulate additively, both
        across fan-out inside one graph and across repeated calls.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not part of a graph")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
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

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor(x, dtype=x.dtype)
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.data.dtype for t in ts))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, backward)


def flatten(x, start_axis: int = 1) -> Tensor:
    x = as_tensor(x)
    return reshape(x, x.shape[:start_axis] + (-1,))


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes.

    The 2-D case is the plain product ``[m,k] @ [k,n] -> [m,n]`` with
    ``dA = dC @ B.T`` and ``dB = A.T @ dC``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold every leading axis into one big GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    z = x.data
    inner = _GELU_K * (z + _GELU_C * z ** 3)
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * z * z)
        return (g * d,)

    return _make(out.astype(x.dtype), (x,), backward)


def rrelu(x, training: bool = False, rng: Optional[np.random.Generator] = None,
          lower: float = RRELU_LOWER, upper: float = RRELU_UPPER) -> Tensor:
    """Randomized leaky ReLU.

    In training mode each negative element gets its own slope drawn from
    U(lower, upper); in eval mode the slope is the interval midpoint.
    """
    x = as_tensor(x)
    if training:
        rng = rng if rng is not None else np.random.default_rng()
        slope = rng.uniform(lower, upper, size=x.shape).astype(x.dtype)
    else:
        slope = np.asarray((lower + upper) / 2.0, dtype=x.dtype)
    factor = np.where(x.data >= 0, np.asarray(1.0, dtype=x.dtype), slope)
    return _make((x.data * factor).astype(x.dtype), (x,), lambda g: (g * factor,))


ACTIVATIONS = ("relu", "gelu", "rrelu")


def activation(x, kind: str, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "rrelu":
        return rrelu(x, training=training, rng=rng)
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# softmax and normalization
# ---------------------------------------------------------------------------

def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    return (e / np.sum(e, axis=axis, keepdims=True)).astype(z.dtype)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax; every slice along ``axis`` sums to one."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax input contains NaN or Inf")
    y = _softmax_np(x.data, axis)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64)
        return ((y * (g - dot)).astype(x.dtype),)

    return _make(y, (x,), backward)


def _normalize_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axis) -> np.ndarray:
    m1 = np.mean(g_hat, axis=axis, keepdims=True, dtype=np.float64)
    m2 = np.mean(g_hat * x_hat, axis=axis, keepdims=True, dtype=np.float64)
    return inv_std * (g_hat - m1 - x_hat * m2)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: feature size {d} but gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    z = x.data.astype(np.float64)
    mu = z.mean(axis=-1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (z - mu) * inv_std
    out = (x_hat * gamma.data + beta.data).astype(x.dtype)
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        g64 = g.astype(np.float64)
        dx = _normalize_backward(g64 * gamma.data, x_hat, inv_std, -1)
        dgamma = np.sum(g64 * x_hat, axis=lead)
        dbeta = np.sum(g64, axis=lead)
        return dx.astype(x.dtype), dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)

    return _make(out, (x, gamma, beta), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (mutated in place in train mode)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-3

    @classmethod
    def fresh(cls, size: int, momentum: float = 0.99, eps: float = 1e-3, dtype=None) -> "BatchNormState":
        dtype = dtype or _default_dtype
        return cls(np.zeros(size, dtype=dtype), np.ones(size, dtype=dtype), momentum, eps)


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over axis 0 of a [batch, features] input.

    Train mode normalizes with the (population) batch statistics and moves
    the running statistics toward them:
    ``running = momentum * running + (1 - momentum) * batch_stat``.
    Eval mode uses the running statistics and leaves them untouched.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects [batch, features], got {x.shape}")
    f = x.shape[1]
    if gamma.shape != (f,) or beta.shape != (f,) or state.running_mean.shape != (f,):
        raise DimensionError(
            f"batch_norm: {f} features but gamma {gamma.shape}, beta {beta.shape}, "
            f"running stats {state.running_mean.shape}")
    z = x.data.astype(np.float64)
    if training:
        if x.shape[0] < 2:
            raise UsageError("batch_norm in train mode needs a batch of at least 2")
        mu = z.mean(axis=0, keepdims=True)
        var = ((z - mu) ** 2).mean(axis=0, keepdims=True)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mu[0]
        state.running_var[...] = m * state.running_var + (1.0 - m) * var[0]
    else:
        mu = state.running_mean.astype(np.float64)[None, :]
        var = state.running_var.astype(np.float64)[None, :]
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (z - mu) * inv_std
    out = (x_hat * gamma.data + beta.data).astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        g_hat = g64 * gamma.data
        if training:
            dx = _normalize_backward(g_hat, x_hat, inv_std, 0)
        else:
            dx = g_hat * inv_std
        return (dx.astype(x.dtype), np.sum(g64 * x_hat, axis=0).astype(gamma.dtype),
                np.sum(g64, axis=0).astype(beta.dtype))

    return _make(out, (x, gamma, beta), backward)


def dropout(x, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_onehot(onehot: np.ndarray, n_classes: int) -> np.ndarray:
    onehot = np.asarray(onehot.data if isinstance(onehot, Tensor) else onehot)
    if onehot.ndim != 2 or onehot.shape[1] != n_classes:
        raise DimensionError(f"one-hot targets of shape {onehot.shape} do not match {n_classes} classes")
    binary = np.all((onehot == 0) | (onehot == 1), axis=1)
    single = np.sum(onehot, axis=1) == 1
    bad = np.flatnonzero(~(binary & single))
    if bad.size:
        raise DataError(f"one-hot row {int(bad[0])} does not contain exactly one 1")
    return onehot


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"class id out of range 0..{n_classes - 1}")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def categorical_cross_entropy(probs, onehot, eps: float = CE_EPS) -> Tensor:
    """Mean over the batch of ``-log p(true class)``, probabilities clamped at ``eps``."""
    probs = as_tensor(probs)
    if probs.ndim != 2:
        raise DimensionError(f"probs must be [batch, classes], got {probs.shape}")
    t = _check_onehot(onehot, probs.shape[1]).astype(bool)
    row_sums = probs.data.sum(axis=1, dtype=np.float64)
    if np.any(np.abs(row_sums - 1.0) > 1e-4):
        raise DataError("probability rows must sum to 1 (tolerance 1e-4)")
    batch = probs.shape[0]
    p_true = np.clip(probs.data[t].astype(np.float64), eps, None)
    loss = np.asarray(-np.mean(np.log(p_true)), dtype=probs.dtype)

    def backward(g):
        d = np.zeros_like(probs.data, dtype=np.float64)
        d[t] = -1.0 / (p_true * batch)
        return ((g * d).astype(probs.dtype),)

    return _make(loss, (probs,), backward)


def softmax_cross_entropy(logits, onehot) -> Tensor:
    """Softmax followed by categorical cross-entropy, fused for stability.

    The gradient with respect to the logits is ``(softmax(logits) - onehot) / batch``.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("logits contain NaN or Inf")
    t = _check_onehot(onehot, logits.shape[1]).astype(np.float64)
    z = logits.data.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    batch = logits.shape[0]
    loss = np.asarray(-np.sum(t * log_p) / batch, dtype=logits.dtype)
    probs = np.exp(log_p)

    def backward(g):
        return ((g * (probs - t) / batch).astype(logits.dtype),)

    return _make(loss, (logits,), backward)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
