"""Transformer building blocks on top of the autograd core.

All layers draw their parameters from a shared `ParamStore`, which keeps a
deterministic insertion-ordered name -> Tensor mapping. That ordering is the
serialization order of checkpoints, and global parameter names are what make
two models with the same dimensions bit-compatible regardless of how their
blocks are grouped into cascade stages.
"""

from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor

# penalty added to masked attention scores; large enough that exp underflows
# to exactly 0.0 in float32 and float64 after row-max subtraction
MASK_PENALTY = -1e9

# toggled off in tight loops where the caller has its own checks
FINITE_CHECKS = True


class MaskError(ValueError):
    """An attention row was left with no visible key."""


class NonFiniteError(FloatingPointError):
    """A forward activation left the finite range."""

    def __init__(self, where: str):
        super().__init__(f"non-finite activation in {where}")
        self.where = where


def assert_finite(arr: np.ndarray, where: str) -> None:
    if FINITE_CHECKS and not np.isfinite(arr).all():
        raise NonFiniteError(where)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with resampling of draws outside two sigma."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class ParamStore:
    """Insertion-ordered registry of named trainable tensors."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(array, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def create(self, name: str, shape, init: str = "trunc_normal",
               rng: Optional[np.random.Generator] = None,
               std: float = 0.02) -> Tensor:
        if init == "trunc_normal":
            if rng is None:
                raise ValueError("trunc_normal init needs an rng")
            arr = trunc_normal(rng, shape, std=std, dtype=self.dtype)
        elif init == "zeros":
            arr = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            arr = np.ones(shape, dtype=self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        return self.add(name, arr)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def size(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing={sorted(missing)[:5]} "
                f"extra={sorted(extra)[:5]}"
            )
        for k, t in self._params.items():
            arr = state[k]
            if tuple(arr.shape) != tuple(t.data.shape):
                raise ValueError(
                    f"shape mismatch for {k!r}: {arr.shape} vs {t.data.shape}"
                )
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator):
        self.d_in = d_in
        self.d_out = d_out
        # fan-aware scale keeps activation variance roughly constant through
        # the projection, which matters for from-scratch training at small
        # widths; embeddings elsewhere keep the flat 0.02 scale
        std = float(np.sqrt(2.0 / (d_in + d_out)))
        self.w = store.create(f"{name}.w", (d_in, d_out), "trunc_normal", rng,
                              std=std)
        self.b = store.create(f"{name}.b", (d_out,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = ag.reshape(x, (-1, self.d_in))
        out = ag.add(ag.matmul(flat, self.w), self.b)
        return ag.reshape(out, lead + (self.d_out,))


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.g = store.create(f"{name}.g", (dim,), "ones")
        self.b = store.create(f"{name}.b", (dim,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.g, self.b, eps=self.eps)


def mask_to_penalty(visible: np.ndarray, dtype) -> np.ndarray:
    """Boolean visibility -> additive score penalty.

    Raises MaskError if any query row has no visible key, since softmax over
    an all-masked row would produce a uniform (meaningless) distribution.
    """
    if not visible.any(axis=-1).all():
        raise MaskError("attention row with no visible keys")
    out = np.zeros(visible.shape, dtype=dtype)
    out[~visible] = MASK_PENALTY
    return out


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         penalty: Optional[np.ndarray] = None,
                         capture: Optional[list] = None) -> Tensor:
    """q,k,v: (B, h, L, dh). `penalty` broadcasts against the score shape.

    If `capture` is a list, the post-softmax probabilities (ndarray) are
    appended to it.
    """
    dh = q.shape[-1]
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2))
    scores = ag.scale(scores, 1.0 / np.sqrt(dh))
    if penalty is not None:
        scores = ag.add_const(scores, penalty)
    probs = ag.softmax(scores)
    if capture is not None:
        capture.append(probs.data)
    return ag.matmul(probs, v)


class MultiHeadAttention:
    """Standard multi-head attention with separate q/k/v/out projections."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.dh = dim // heads
        self.q = Linear(store, f"{name}.q", dim, dim, rng)
        self.k = Linear(store, f"{name}.k", dim, dim, rng)
        self.v = Linear(store, f"{name}.v", dim, dim, rng)
        self.o = Linear(store, f"{name}.o", dim, dim, rng)

    def _split(self, x: Tensor, b: int, n: int) -> Tensor:
        return ag.swapaxes(ag.reshape(x, (b, n, self.heads, self.dh)), 1, 2)

    def __call__(self, x_q: Tensor, x_kv: Tensor,
                 visible: Optional[np.ndarray] = None,
                 capture: Optional[list] = None) -> Tensor:
        b, lq, _ = x_q.shape
        lk = x_kv.shape[1]
        q = self._split(self.q(x_q), b, lq)
        k = self._split(self.k(x_kv), b, lk)
        v = self._split(self.v(x_kv), b, lk)
        penalty = None
        if visible is not None:
            if visible.ndim == 2:
                visible = visible[None, None]
            elif visible.ndim == 3:
                visible = visible[:, None]
            penalty = mask_to_penalty(visible, x_q.dtype)
        out = scaled_dot_attention(q, k, v, penalty, capture)
        out = ag.reshape(ag.swapaxes(out, 1, 2), (b, lq, self.dim))
        return self.o(out)


class Mlp:
    """Two-layer feed-forward with GELU, hidden width = ratio * dim."""

    def __init__(self, store: ParamStore, name: str, dim: int,
                 rng: np.random.Generator, ratio: int = 4):
        self.fc1 = Linear(store, f"{name}.fc1", dim, ratio * dim, rng)
        self.fc2 = Linear(store, f"{name}.fc2", ratio * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class TransformerBlock:
    """Pre-norm self-attention block: x += attn(ln(x)); x += mlp(ln(x))."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, heads, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.mlp = Mlp(store, f"{name}.mlp", dim, rng)
        self.name = name

    def __call__(self, x: Tensor, capture: Optional[list] = None) -> Tensor:
        h = self.ln1(x)
        x = ag.add(x, self.attn(h, h, capture=capture))
        x = ag.add(x, self.mlp(self.ln2(x)))
        assert_finite(x.data, self.name)
        return x
