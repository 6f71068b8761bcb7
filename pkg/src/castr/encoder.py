"""Cascaded vision encoder.

An image becomes a sequence of patch tokens plus a CLS token; the token
sequence then flows through C sub-transformers ("stages"). Between stages
the sequence is shortened by a selection scheme, so later blocks run on
fewer tokens. Every retained token carries a record of which source patches
it summarizes, which the attention exporter uses to scatter weights back
onto the image grid.

Transformer block parameters are named by global block index, independent of
how blocks are grouped into stages: a cascaded encoder and a standard one
with the same depth therefore share an identical parameter set, and
checkpoints move freely between schedules.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .config import EncoderConfig, TokenSchedule, token_schedule

# sentinel used in retained maps for the class token
CLS_SOURCE = -1


@dataclass
class PatchGrid:
    patches: np.ndarray        # (B, n_patches, P*P*C), row-major patch order
    grid_hw: tuple             # (H/P, W/P)
    origins: np.ndarray        # (n_patches, 2) top-left pixel of each patch


def patchify(images: np.ndarray, patch: int) -> PatchGrid:
    """Cut a batch of images into non-overlapping flattened patches.

    images: (B, H, W) or (B, H, W, C), float. Patch order is row-major:
    left to right, then top to bottom.
    """
    if images.ndim == 3:
        images = images[..., None]
    b, h, w, c = images.shape
    if h % patch != 0 or w % patch != 0:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch * patch * c)
    origins = np.array(
        [(r * patch, col * patch) for r in range(gh) for col in range(gw)],
        dtype=np.int64,
    )
    return PatchGrid(np.ascontiguousarray(x), (gh, gw), origins)


@dataclass
class TokenState:
    """Token sequence plus provenance.

    retained[i] is a tuple of source patch indices summarized by token i;
    the class token is marked with CLS_SOURCE. grid_intact means the patch
    tokens still form the full original grid (required by the conv scheme).
    """

    tokens: Tensor             # (B, N, K)
    retained: tuple
    grid_hw: tuple
    grid_intact: bool = True

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


def _window_edges(n_src: int, n_windows: int) -> list:
    """Contiguous window boundaries covering n_src items.

    Sizes differ by at most one and the largest equals
    ceil(n_src / n_windows), matching fixed-size windows whenever the counts
    divide evenly; unlike fixed-size windows this never produces an empty
    window.
    """
    return [(k * n_src) // n_windows for k in range(n_windows + 1)]


def select_tokens(state: TokenState, scheme: str, n_out: int,
                  conv: Optional[dict] = None) -> TokenState:
    """Shorten the token sequence to n_out tokens. CLS always survives."""
    n = state.n_tokens
    if n_out >= n:
        raise ValueError(f"selection target {n_out} must be < current {n}")
    if n_out < 2:
        raise ValueError(f"selection target {n_out} must be ≥ 2 (CLS + a patch token)")

    if scheme == "first_n":
        tokens = ag.narrow(state.tokens, 1, 0, n_out)
        return TokenState(tokens, state.retained[:n_out], state.grid_hw, False)

    if scheme in ("avg_pool_1d", "max_pool_1d"):
        edges = _window_edges(n - 1, n_out - 1)
        cls_tok = ag.narrow(state.tokens, 1, 0, 1)
        pooled = [cls_tok]
        retained = [state.retained[0]]
        for k in range(n_out - 1):
            lo, hi = edges[k] + 1, edges[k + 1] + 1
            win = ag.narrow(state.tokens, 1, lo, hi - lo)
            if scheme == "avg_pool_1d":
                pooled.append(ag.mean(win, axis=1, keepdims=True))
            else:
                pooled.append(ag.amax(win, axis=1, keepdims=True))
            srcs: tuple = ()
            for i in range(lo, hi):
                srcs = srcs + state.retained[i]
            retained.append(srcs)
        return TokenState(ag.concat(pooled, axis=1), tuple(retained),
                          state.grid_hw, False)

    if scheme == "conv2d_stride":
        if not state.grid_intact:
            raise ValueError(
                "conv2d_stride requires the full patch grid; it can only be "
                "the first reduction"
            )
        if conv is None:
            raise ValueError("conv2d_stride scheme needs its learned weights")
        gh, gw = state.grid_hw
        out_w = (gw + 1) // 2
        natural = 1 + gh * out_w
        if n_out != natural:
            raise ValueError(
                f"conv2d_stride on a {gh}x{gw} grid yields {natural} tokens, "
                f"schedule asked for {n_out}"
            )
        b = state.tokens.shape[0]
        k = state.tokens.shape[2]
        cls_tok = ag.narrow(state.tokens, 1, 0, 1)
        patches = ag.narrow(state.tokens, 1, 1, n - 1)
        grid = ag.reshape(patches, (b, gh, gw, k))
        even = ag.take_rows(grid, np.arange(0, gw, 2), axis=2)
        y = ag.matmul(ag.reshape(even, (-1, k)), conv["w1"])
        if gw > 1:
            odd = ag.take_rows(grid, np.arange(1, gw, 2), axis=2)
            yo = ag.matmul(ag.reshape(odd, (-1, k)), conv["w2"])
            if gw % 2 == 1:
                # last output column has no right-hand partner
                y2 = ag.reshape(y, (b, gh, out_w, k))
                yo2 = ag.reshape(yo, (b, gh, out_w - 1, k))
                head_cols = ag.add(ag.narrow(y2, 2, 0, out_w - 1), yo2)
                y2 = ag.concat([head_cols, ag.narrow(y2, 2, out_w - 1, 1)], axis=2)
                y = ag.reshape(y2, (-1, k))
            else:
                y = ag.add(y, yo)
        y = ag.add(y, conv["b"])
        out = ag.concat([cls_tok, ag.reshape(y, (b, gh * out_w, k))], axis=1)
        retained = [state.retained[0]]
        for r in range(gh):
            for cc in range(out_w):
                srcs = state.retained[1 + r * gw + 2 * cc]
                if 2 * cc + 1 < gw:
                    srcs = srcs + state.retained[1 + r * gw + 2 * cc + 1]
                retained.append(srcs)
        return TokenState(out, tuple(retained), (gh, out_w), False)

    raise ValueError(f"unknown selection scheme {scheme!r}")


class CascadeEncoder:
    """Patch embed -> C stages of transformer blocks with token selection
    between stages -> final layer norm."""

    def __init__(self, cfg: EncoderConfig, store: nn.ParamStore,
                 rng: np.random.Generator, prefix: str = "enc"):
        self.cfg = cfg
        k = cfg.embed_dim
        p = cfg.patch_size
        self.patch_proj = nn.Linear(store, f"{prefix}.patch", 3 * p * p, k, rng)
        self.cls = store.create(f"{prefix}.cls", (k,), "trunc_normal", rng)
        self.pos = store.create(f"{prefix}.pos", (cfg.n_tokens, k), "trunc_normal", rng)
        self.blocks = [
            nn.TransformerBlock(store, f"{prefix}.block{i}", k, cfg.heads, rng)
            for i in range(cfg.total_blocks)
        ]
        self.final_ln = nn.LayerNorm(store, f"{prefix}.ln", k)
        self.conv = None
        if cfg.selection_scheme == "conv2d_stride":
            self.conv = {
                "w1": store.create(f"{prefix}.reduce.w1", (k, k), "trunc_normal", rng),
                "w2": store.create(f"{prefix}.reduce.w2", (k, k), "trunc_normal", rng),
                "b": store.create(f"{prefix}.reduce.b", (k,), "zeros"),
            }

    # ------------------------------------------------------------------
    # staged evaluation pieces; __call__ composes them

    def embed(self, images: np.ndarray) -> TokenState:
        """Images (B, H, W) grayscale or (B, H, W, 3) in [0, 1] -> tokens."""
        if images.ndim == 3:
            images = np.repeat(images[..., None], 3, axis=-1)
        grid = patchify(images.astype(self.cls.dtype, copy=False), self.cfg.patch_size)
        x = self.patch_proj(Tensor(grid.patches))
        b = x.shape[0]
        k = self.cfg.embed_dim
        cls_tile = ag.add(ag.reshape(self.cls, (1, 1, k)),
                          Tensor(np.zeros((b, 1, k), dtype=self.cls.dtype)))
        tokens = ag.concat([cls_tile, x], axis=1)
        tokens = ag.add(tokens, ag.reshape(self.pos, (1, self.cfg.n_tokens, k)))
        retained = ((CLS_SOURCE,),) + tuple((i,) for i in range(self.cfg.n_patches))
        return TokenState(tokens, retained, grid.grid_hw, True)

    def stage_block_range(self, stage: int) -> range:
        start = sum(self.cfg.blocks_per_stage[:stage])
        return range(start, start + self.cfg.blocks_per_stage[stage])

    def run_stage(self, state: TokenState, stage: int) -> TokenState:
        x = state.tokens
        for i in self.stage_block_range(stage):
            x = self.blocks[i](x)
        return TokenState(x, state.retained, state.grid_hw, state.grid_intact)

    def reduce(self, state: TokenState, n_out: int) -> TokenState:
        return select_tokens(state, self.cfg.selection_scheme, n_out, self.conv)

    def finalize(self, state: TokenState) -> TokenState:
        return TokenState(self.final_ln(state.tokens), state.retained,
                          state.grid_hw, state.grid_intact)

    def __call__(self, images: np.ndarray,
                 schedule: Optional[TokenSchedule] = None,
                 reduction: int = 2,
                 stage_hook: Optional[Callable] = None) -> TokenState:
        """Full encode. `reduction` feeds token_schedule when no explicit
        schedule is given (1 disables selection; equivalence tests use it).
        `stage_hook(stage_idx, state)` observes each post-stage state."""
        if schedule is None:
            schedule = token_schedule(self.cfg, reduction)
        state = self.embed(images)
        if state.n_tokens != schedule.n0:
            raise ValueError(
                f"schedule expects {schedule.n0} initial tokens, got {state.n_tokens}"
            )
        stages = self.cfg.stages
        for si in range(stages):
            state = self.run_stage(state, si)
            if stage_hook is not None:
                stage_hook(si, state)
            if si < stages - 1:
                target = schedule.counts[si + 1]
                if target < state.n_tokens:
                    state = self.reduce(state, target)
                elif target != state.n_tokens:
                    raise ValueError(
                        f"schedule increases token count ({state.n_tokens} -> {target})"
                    )
        return self.finalize(state)
