"""Reverse-mode autodiff on dense numpy arrays.

A `Tensor` wraps an ndarray. While a `Tape` is active, every primitive op
whose inputs require gradients records the output node (with parent refs and
a backward closure) onto the tape in creation order; `Tape.backward(loss)`
walks that record in reverse, which is automatically a valid topological
order. Outside a tape, ops are plain numpy compute with no graph overhead,
which is the inference path.

Two float widths are supported via the module default dtype: float64 for
gradient checks and tests, float32 for training runs.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from karma.errors import NumericError, KarmaError


class ShapeError(KarmaError):
    """Operand shapes do not conform to the op."""


class NonFiniteError(NumericError):
    """An op produced NaN or Inf."""


class TapeError(KarmaError):
    """Tape misuse: backward on a non-scalar, double backward, nesting."""


_state = threading.local()


def _get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported default dtype {dt}")
    _state.dtype = dt


def get_default_dtype() -> np.dtype:
    return _get_default_dtype()


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default float width (e.g. float64 in tests)."""
    prev = _get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Usage::

        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)   # fills .grad on requires_grad leaves
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._consumed = False
        self._active = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("tapes do not nest")
        _state.tape = self
        self._active = True
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.tape = None
        self._active = False

    def record(self, node: "Tensor") -> None:
        self._nodes.append(node)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: "Tensor") -> None:
        """Backpropagate from a scalar loss; accumulates into leaf ``.grad``.

        The tape is consumed: a second backward without a fresh forward
        raises. Interior gradients are freed after the sweep.
        """
        if self._consumed:
            raise TapeError("backward called twice without a new forward pass")
        if loss.data.shape != ():
            raise TapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any requires_grad tensor")
        self._consumed = True

        loss.grad = np.ones((), dtype=loss.data.dtype)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise ShapeError(
                        f"gradient shape {g.shape} != value shape {parent.data.shape} "
                        f"(op {node.op})"
                    )
                if parent.grad is None:
                    # closures hand back fresh arrays; accumulation below is
                    # out-of-place, so adopting g without a copy is safe
                    parent.grad = g if g.dtype == parent.data.dtype else g.astype(parent.data.dtype)
                else:
                    parent.grad = parent.grad + g
        # free interior grads; leaves keep theirs for the optimizer
        for node in self._nodes:
            node.grad = None
        self._nodes.clear()


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output of op '{op}'")


class Tensor:
    """Dense real tensor; leaf by default, interior node when produced by ops."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _get_default_dtype())
        _check_finite(arr, "leaf")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t.op = "detach"
        t._parents = ()
        t._backward = None
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, like=self), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g, b.data.shape) if b.requires_grad else None)

    return _make(data, (a, b), bwd, "add")


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd, "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None)

    return _make(data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd, "div")


def power(a: Tensor, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    data = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(data, (a,), bwd, "pow")


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return _make(data, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(data, (a,), bwd, "log")


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - data * data),)

    return _make(data, (a,), bwd, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # stable: exp of a non-positive argument on both branches
    data = np.where(a.data >= 0,
                    1.0 / (1.0 + np.exp(-np.maximum(a.data, 0))),
                    np.exp(np.minimum(a.data, 0)) / (1.0 + np.exp(np.minimum(a.data, 0))))

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), bwd, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed stably; softplus(0) == ln 2 exactly."""
    a = _as_tensor(a)
    data = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)

    def bwd(g):
        s = np.where(a.data >= 0,
                     1.0 / (1.0 + np.exp(-np.maximum(a.data, 0))),
                     np.exp(np.minimum(a.data, 0)) / (1.0 + np.exp(np.minimum(a.data, 0))))
        return (g * s,)

    return _make(data, (a,), bwd, "softplus")


_GELU_C = 0.7978845608028654  # sqrt(2/pi), tanh-approximation constant
_GELU_C3 = _GELU_C * 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximate GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(x * (_GELU_C + _GELU_C3 * x2))
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        # in-place scratch math: these arrays are the step's largest
        u = x2 * (3.0 * _GELU_C3)
        u += _GELU_C
        tt = t * t
        np.subtract(1.0, tt, out=tt)
        u *= tt
        u *= x
        u += t
        u += 1.0
        u *= 0.5
        u *= g
        return (u,)

    return _make(data, (a,), bwd, "gelu")


# ---------------------------------------------------------------------------
# shape & indexing

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # (..., m, k) @ (k, n): flatten leading dims into one GEMM
                # instead of a batched product plus a reduction
                k = a.data.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(data, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fused x @ w + bias over the last axis."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0] or w.data.ndim != 2:
        raise ShapeError(f"linear shapes {x.data.shape} @ {w.data.shape}")
    data = x.data @ w.data
    if b is not None:
        data += b.data

    def bwd(g):
        k, n = w.data.shape
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, k).T @ g.reshape(-1, n) if w.requires_grad else None
        gb = None
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, bwd, "linear")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bwd, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(ts), bwd, "concat")


def getitem(a: Tensor, key) -> Tensor:
    a = _as_tensor(a)
    data = a.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _make(data.copy(), (a,), bwd, "slice")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by an integer array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("gather_rows ids must be integers")
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"gather id out of range [0, {n})")
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data.copy(), (table,), bwd, "gather")


# ---------------------------------------------------------------------------
# reductions & normalizations

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(np.asarray(data), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.data.shape).copy(),)

    return _make(np.asarray(data), (a,), bwd, "mean")


def _softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    data = _softmax_data(a.data, axis)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def bwd(g):
        s = np.exp(data)
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), bwd, "log_softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (pre-affine)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * gx) * inv,)

    return _make(xhat, (a,), bwd, "layer_norm")


def layer_norm_affine(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """layer_norm followed by the learned scale/shift, fused into one node."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        n = gamma.data.shape[-1]
        lead = g.reshape(-1, n)
        ggamma = (lead * xhat.reshape(-1, n)).sum(axis=0) if gamma.requires_grad else None
        gbeta = lead.sum(axis=0) if beta.requires_grad else None
        gx = None
        if a.requires_grad:
            gh = g * gamma.data
            gm = gh.mean(axis=-1, keepdims=True)
            gxh = (gh * xhat).mean(axis=-1, keepdims=True)
            gx = (gh - gm - xhat * gxh) * inv
        return (gx, ggamma, gbeta)

    return _make(data, (a, gamma, beta), bwd, "layer_norm_affine")


# ---------------------------------------------------------------------------
# fused losses and attention

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of integer ``targets`` under ``logits`` rows.

    logits: (N, V); targets: (N,) ints. Gradient is the classic
    (softmax - onehot) / N.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {logits.data.shape}")
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"target id out of range [0, {v})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    data = np.asarray(-logp[np.arange(n), targets].mean())

    def bwd(g):
        grad = np.exp(logp)
        grad[np.arange(n), targets] -= 1.0
        return (grad * (g / n),)

    return _make(data, (logits,), bwd, "cross_entropy")


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error over all elements."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    diff = add(a, neg(b))
    return tmean(mul(diff, diff))


def attention(q: Tensor, k: Tensor, v: Tensor, *, causal: bool = False,
              key_mask: Optional[np.ndarray] = None,
              capture: Optional[list] = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    q, k: (..., L, dk); v: (..., L, dv). ``causal`` masks keys j > i exactly
    (weight 0). ``key_mask`` is a boolean array broadcastable to the score
    shape (..., Lq, Lk); False keys are excluded. Query rows with no valid
    key fall back to attending key 0 (their output is conventionally unused;
    they receive zero gradient). If ``capture`` is a list, the weight arrays
    are appended to it (no gradient side effects).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError("attention q/k feature dims differ")
    lq, lk = q.data.shape[-2], k.data.shape[-2]
    scale = float(1.0 / np.sqrt(q.data.shape[-1]))  # python float: no f64 promotion
    scores = (q.data @ k.data.swapaxes(-1, -2)) * scale

    allowed = np.ones((lq, lk), dtype=bool)
    if causal:
        if lq != lk:
            raise ShapeError("causal attention requires square score matrices")
        allowed = np.tril(allowed)
    allowed = np.broadcast_to(allowed, scores.shape)
    if key_mask is not None:
        allowed = allowed & np.broadcast_to(np.asarray(key_mask, dtype=bool), scores.shape)
    scores = np.where(allowed, scores, -np.inf)
    dead = ~allowed.any(axis=-1)
    if dead.any():
        rescue = np.zeros_like(scores)
        rescue[..., 0] = 1.0
        scores = np.where(dead[..., None] & (rescue > 0), 0.0, scores)
    weights = _softmax_data(scores, -1)
    out = weights @ v.data
    if capture is not None:
        capture.append(weights.copy())

    def bwd(g):
        gv = weights.swapaxes(-1, -2) @ g if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            gw = g @ v.data.swapaxes(-1, -2)
            ds = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                gq = _unbroadcast((ds @ k.data) * scale, q.data.shape)
            if k.requires_grad:
                gk = _unbroadcast((ds.swapaxes(-1, -2) @ q.data) * scale, k.data.shape)
        return (gq, gk, _unbroadcast(gv, v.data.shape) if gv is not None else None)

    return _make(out, (q, k, v), bwd, "attention")


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm along the last axis."""
    sq = tsum(mul(a, a), axis=-1, keepdims=True)
    return mul(a, power(add(sq, eps), -0.5))
