"""Dense tensors with reverse-mode automatic differentiation.

Storage is a numpy array; every differentiable op records its parents and a
closure that pushes the output gradient back to them. ``backward`` walks the
recorded graph in reverse topological order, so each node is visited once per
call. Nothing is recorded inside a ``no_grad()`` block.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, ndtr

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "frozen", "_parents", "_backward", "name")
    __array_priority__ = 1000  # numpy defers to Tensor.__radd__ etc.

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.frozen = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------
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

    def __getitem__(self, idx):
        return index(self, idx)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        # python scalars adopt the other operand's dtype under numpy promotion
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_grad(*ts: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _needs_grad(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _scalar_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def bw(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * out))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * 0.5 / out))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: _accumulate(a, g * mask))


_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, so finite differences agree)."""
    x = a.data
    c = x.dtype.type(_SQRT_2_OVER_PI)
    inner = c * (x + x.dtype.type(0.044715) * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * x.dtype.type(0.044715) * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accumulate(a, g * d)

    return _make(out, (a,), bw)


SOFTPLUS_LINEAR_ABOVE = 30.0


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x); returns x itself above 30 where the two agree to float precision."""
    x = a.data
    big = x > SOFTPLUS_LINEAR_ABOVE
    safe = np.where(big, 0.0, x)
    out = np.where(big, x, np.log1p(np.exp(safe))).astype(x.dtype)
    sig = expit(x).astype(x.dtype)
    return _make(out, (a,), lambda g: _accumulate(a, g * sig))


def normal_cdf(a: Tensor) -> Tensor:
    x = a.data
    out = ndtr(x).astype(x.dtype)
    pdf = (np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)).astype(x.dtype)
    return _make(out, (a,), lambda g: _accumulate(a, g * pdf))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        _accumulate(a, _unbroadcast(np.where(mask, g, 0), a.shape))
        _accumulate(b, _unbroadcast(np.where(mask, 0, g), b.shape))

    return _make(np.where(mask, a.data, b.data), (a, b), bw)


# -- reductions ------------------------------------------------------------

def _expand_back(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (a,), lambda g: _accumulate(a, _expand_back(g, a.shape, axis, keepdims)))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size / max(out.size, 1)

    def bw(g):
        _accumulate(a, _expand_back(g, a.shape, axis, keepdims) / a.dtype.type(n))

    return _make(out, (a,), bw)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into one tall 2-D product
        lead = a.shape[:-1]
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*lead, b.shape[-1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accumulate(b, a.data.reshape(-1, a.shape[-1]).T @ g2)

        return _make(out, (a, b), bw)

    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    n = d.shape[-1]
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    parents = [x] + [p for p in (gain, bias) if p is not None]

    def bw(g):
        if gain is not None and gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data if gain is not None else g
            dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _make(out, parents, bw)


# -- shape manipulation ---------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: _accumulate(a, np.transpose(g, inv)))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accumulate(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, bw)


def index(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in the backward pass."""
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(np.array(out, copy=True), (a,), bw)


def take_along_axis(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    out = np.take_along_axis(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        # put_along_axis would overwrite duplicates, so scatter-add explicitly
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis % a.ndim] = indices
        np.add.at(full, tuple(idx), g)
        _accumulate(a, full)

    return _make(out, (a,), bw)


# -- selection (non-differentiable index outputs) ------------------------

def topk(x, k: int, axis: int = -1):
    """The k largest entries along ``axis`` in descending order.

    Ties resolve to the lower index. Returns ``(values, indices)``; values is
    a Tensor differentiable through the gather, indices is an int array.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    n = data.shape[axis]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for axis of length {n}")
    # stable sort on the negated values keeps lower indices first among equals
    order = np.argsort(-data, axis=axis, kind="stable")
    indices = np.take(order, np.arange(k), axis=axis)
    t = x if isinstance(x, Tensor) else Tensor(data)
    return take_along_axis(t, indices, axis), indices


def argmax(x, axis: int = -1) -> np.ndarray:
    """Index of the maximum; numpy already returns the first (lowest) on ties."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argmax(data, axis=axis)


# -- graph traversal -------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior nodes are not needed once their gradient has been pushed
            node._backward = None
            node._parents = ()
            node.grad = None if node is not loss else node.grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar Tensor. The denominator per coordinate is
    max(|analytic|, |numeric|, 1e-8). ``coords`` restricts the check to the
    given flat indices; all coordinates are checked by default.
    """
    x.grad = None
    was = x.requires_grad
    x.requires_grad = True
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.requires_grad = was

    flat = x.data.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def grad_check_directional(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                           rng: np.random.Generator | None = None, n_dirs: int = 2) -> float:
    """Relative error of directional derivatives along random Rademacher directions.

    Every coordinate of ``params`` moves by +-h at once, so the finite
    difference estimates sum_i g_i v_i, which stays well above round-off even
    when individual coordinates have tiny gradients.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    backward(f())
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for _ in range(n_dirs):
            dirs = [rng.choice([-1.0, 1.0], size=p.shape).astype(p.dtype) for p in params]
            ana = float(sum((g * v).sum() for g, v in zip(grads, dirs)))
            orig = [p.data.copy() for p in params]
            for p, v, o in zip(params, dirs, orig):
                p.data[...] = o + h * v
            fp = float(f().data)
            for p, v, o in zip(params, dirs, orig):
                p.data[...] = o - h * v
            fm = float(f().data)
            for p, o in zip(params, orig):
                p.data[...] = o
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst
