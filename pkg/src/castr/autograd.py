"""Reverse-mode automatic differentiation over NumPy arrays.

A `Tensor` wraps an ndarray plus an optional record of how it was produced
(parent tensors and a vector-Jacobian closure). `backward` walks the tape in
reverse topological order and accumulates gradients into the `.grad` of
every leaf that has `requires_grad=True`. Only float32/float64 data is
supported; integer inputs (token ids, targets) are passed to ops as plain
ndarrays.

Graph recording can be suspended with the `no_grad` context manager.
"""

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # a few operators for readability; the op functions below do the work
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root: Tensor) -> None:
    """Backpropagate from a scalar tensor.

    Gradients accumulate (+=) into `.grad` of every requires-grad leaf, so
    callers must reset grads between steps.
    """
    if root.data.size != 1:
        raise ValueError(f"backward expects a scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    # iterative reverse topological order (post-order DFS)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # copy: vjp outputs may alias each other (e.g. add with equal shapes)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _sum_to(g, a.data.shape), _sum_to(g, b.data.shape)

    return _make(a.data + b.data, (a, b), vjp)


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=a.data.dtype)

    def vjp(g):
        return (_sum_to(g, a.data.shape),)

    return _make(a.data + c, (a,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _sum_to(g * b.data, a.data.shape), _sum_to(g * a.data, b.data.shape)

    return _make(a.data * b.data, (a, b), vjp)


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=a.data.dtype)

    def vjp(g):
        return (_sum_to(g * c, a.data.shape),)

    return _make(a.data * c, (a,), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _make(a.data * s, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    need_a = a.requires_grad
    need_b = b.requires_grad

    def vjp(g):
        da = db = None
        if need_a:
            da = _sum_to(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if need_b:
            db = _sum_to(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return da, db

    return _make(a.data @ b.data, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(a.data.reshape(shape), (a,), vjp)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def vjp(g):
        return (np.ascontiguousarray(g.swapaxes(ax1, ax2)),)

    return _make(np.ascontiguousarray(a.data.swapaxes(ax1, ax2)), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        da = np.zeros_like(a.data)
        da[idx] = g
        return (da,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), vjp)


def take_rows(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Select rows along `axis` by integer index (static gather)."""
    indices = np.asarray(indices)

    def vjp(g):
        da = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = indices
        np.add.at(da, tuple(sl), g)
        return (da,)

    return _make(np.ascontiguousarray(np.take(a.data, indices, axis=axis)), (a,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """table: (V, D); ids: integer array of any shape -> (ids.shape..., D)."""
    ids = np.asarray(ids)

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (dt,)

    return _make(table.data[ids], (table,), vjp)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties route the gradient to the first occurrence."""
    idx = np.argmax(a.data, axis=axis)
    picked = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)

    def vjp(g):
        da = np.zeros_like(a.data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(da, np.expand_dims(idx, axis), gg, axis)
        return (da,)

    data = picked if keepdims else np.squeeze(picked, axis=axis)
    return _make(data, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# kernel-backed ops


def _rows2d(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr.reshape(-1, arr.shape[-1]))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x2 = _rows2d(x.data)
    m, k = x2.shape
    y = np.empty_like(x2)
    mu = np.empty(m, dtype=x2.dtype)
    rstd = np.empty(m, dtype=x2.dtype)
    kernels.ln_fwd(x2, gamma.data, beta.data, eps, y, mu, rstd)

    def vjp(g):
        g2 = _rows2d(g)
        dx = np.empty_like(x2)
        dgamma = np.empty_like(gamma.data)
        dbeta = np.empty_like(beta.data)
        kernels.ln_bwd(g2, x2, gamma.data, mu, rstd, dx, dgamma, dbeta)
        return dx.reshape(x.data.shape), dgamma, dbeta

    return _make(y.reshape(x.data.shape), (x, gamma, beta), vjp)


def gelu(x: Tensor) -> Tensor:
    flat = np.ascontiguousarray(x.data.reshape(-1))
    y = np.empty_like(flat)
    kernels.gelu_fwd(flat, y)

    def vjp(g):
        dx = np.empty_like(flat)
        kernels.gelu_bwd(flat, np.ascontiguousarray(g.reshape(-1)), dx)
        return (dx.reshape(x.data.shape),)

    return _make(y.reshape(x.data.shape), (x,), vjp)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x2 = _rows2d(x.data)
    y = np.empty_like(x2)
    kernels.softmax_fwd(x2, y)

    def vjp(g):
        dx = np.empty_like(y)
        kernels.softmax_bwd(y, _rows2d(g), dx)
        return (dx.reshape(x.data.shape),)

    return _make(y.reshape(x.data.shape), (x,), vjp)


def cross_entropy_weighted(logits: Tensor, targets: np.ndarray,
                           weights: np.ndarray) -> Tensor:
    """Weighted sum of per-row negative log likelihoods.

    logits: (M, V); targets: (M,) int; weights: (M,) float. Rows with zero
    weight contribute nothing (their targets may be any valid index).
    """
    l = logits.data
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=l.dtype)
    m = l.max(axis=1, keepdims=True)
    z = l - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    nll = lse - l[np.arange(l.shape[0]), targets]
    loss = (nll * weights).sum()

    def vjp(g):
        p = np.exp(l - lse[:, None])
        p[np.arange(l.shape[0]), targets] -= 1.0
        return (p * (weights * float(g))[:, None],)

    return _make(np.asarray(loss, dtype=l.dtype), (logits,), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int = -1) -> Tensor:
    """Mean cross entropy over rows whose target != ignore_id."""
    targets = np.asarray(targets)
    keep = targets != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every target is ignored")
    weights = keep.astype(logits.data.dtype) / n
    safe = np.where(keep, targets, 0)
    return cross_entropy_weighted(logits, safe, weights)


# ---------------------------------------------------------------------------
# numeric gradient verification


def grad_check(f: Callable[[], Tensor], wrt: Sequence[Tensor], eps: float = 1e-5,
               max_coords: Optional[int] = None, rng=None) -> float:
    """Compare analytic gradients of `f` against central differences.

    `f` is a zero-argument callable returning a scalar Tensor; it must be
    deterministic and use the tensors in `wrt` as leaves. Returns the worst
    relative error over all checked coordinates. Tensors should be float64
    for the comparison to be meaningful at tight tolerances.

    When `max_coords` is given, at most that many coordinates per tensor are
    probed (uniformly sampled with `rng`).
    """
    for t in wrt:
        t.grad = None
    backward(f())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    worst = 0.0
    for t, an in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        aflat = an.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(aflat[i] - num) / denom)
    return worst
