"""Permuted-language decoder.

Queries are learned position embeddings, one per output slot. Each block
runs masked cross-attention over the context stream (character + position
embeddings of the ground truth during training, of the decoded prefix during
inference), then cross-attention over the vision tokens, then an MLP, all
with pre-norm residuals. In multi-block decoders only the query stream
evolves; context and vision tokens are reused unchanged by every block.

Training draws several position orderings per sample. Under an ordering z,
the prediction for position p may see exactly the positions that precede p
in z — plus a learned BOS slot so that the first decoded position still has
a nonempty context. Averaging the per-ordering losses gives the training
objective; the identity ordering is always included, which keeps the
left-to-right inference path trained.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .config import DecoderConfig


@dataclass(frozen=True)
class Permutation:
    """order[t] = position decoded at step t (0-based positions)."""

    order: tuple

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError(f"not a bijection over positions: {self.order}")

    def __len__(self) -> int:
        return len(self.order)

    @cached_property
    def rank(self) -> tuple:
        """rank[p] = decode step at which position p is produced."""
        r = [0] * len(self.order)
        for t, p in enumerate(self.order):
            r[p] = t
        return tuple(r)


def identity_perm(l_eff: int) -> Permutation:
    return Permutation(tuple(range(l_eff)))


def sample_permutations(k: int, l_eff: int,
                        rng: np.random.Generator) -> list:
    """K orderings over l_eff positions; the first is always the identity.

    The remaining k-1 are drawn uniformly; duplicates are possible (and
    unavoidable for tiny l_eff).
    """
    if k < 1:
        raise ValueError(f"need at least one permutation, got {k}")
    perms = [identity_perm(l_eff)]
    for _ in range(k - 1):
        perms.append(Permutation(tuple(int(i) for i in rng.permutation(l_eff))))
    return perms


def context_visibility(perm: Permutation) -> np.ndarray:
    """Boolean (L, L): entry (q, k) true iff position k precedes q under z.

    Row q has exactly rank(q) true entries and the diagonal is false.
    """
    rank = np.asarray(perm.rank)
    return rank[None, :] < rank[:, None]


class PLDBlock:
    """Masked context cross-attention, vision cross-attention, MLP.

    Layer norms sit on the query stream (pre-norm); the key/value streams
    enter as provided.
    """

    def __init__(self, store: nn.ParamStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator):
        self.ln1 = nn.LayerNorm(store, f"{name}.ln1", dim)
        self.ca_ctx = nn.MultiHeadAttention(store, f"{name}.ctx", dim, heads, rng)
        self.ln2 = nn.LayerNorm(store, f"{name}.ln2", dim)
        self.ca_vis = nn.MultiHeadAttention(store, f"{name}.vis", dim, heads, rng)
        self.ln3 = nn.LayerNorm(store, f"{name}.ln3", dim)
        self.mlp = nn.Mlp(store, f"{name}.mlp", dim, rng)
        self.name = name

    def __call__(self, x: Tensor, context: Tensor, vision: Tensor,
                 ctx_visible: np.ndarray,
                 capture: Optional[list] = None) -> Tensor:
        x = ag.add(x, self.ca_ctx(self.ln1(x), context, visible=ctx_visible))
        x = ag.add(x, self.ca_vis(self.ln2(x), vision, capture=capture))
        x = ag.add(x, self.mlp(self.ln3(x)))
        nn.assert_finite(x.data, self.name)
        return x


class PLDDecoder:
    def __init__(self, cfg: DecoderConfig, store: nn.ParamStore,
                 rng: np.random.Generator, enc_dim: int, prefix: str = "dec"):
        self.cfg = cfg
        d = cfg.embed_dim
        self.n_chars = cfg.charset_size
        self.eos_id = cfg.charset_size
        self.pad_id = cfg.charset_size + 1
        # rows: chars + EOS + PAD. The PAD row is only ever gathered for
        # teacher rows whose loss weight is zero, but it must exist for the
        # lookup to be valid.
        self.char_emb = store.create(f"{prefix}.char_emb",
                                     (cfg.charset_size + 2, d), "trunc_normal", rng)
        self.pos_emb = store.create(f"{prefix}.pos",
                                    (cfg.max_len + 1, d), "trunc_normal", rng)
        self.bos = store.create(f"{prefix}.bos", (d,), "trunc_normal", rng)
        self.bridge = None
        if enc_dim != d:
            self.bridge = nn.Linear(store, f"{prefix}.bridge", enc_dim, d, rng)
        self.blocks = [
            PLDBlock(store, f"{prefix}.block{i}", d, cfg.heads, rng)
            for i in range(cfg.blocks)
        ]
        self.final_ln = nn.LayerNorm(store, f"{prefix}.ln", d)
        self.head = nn.Linear(store, f"{prefix}.head", d, cfg.charset_size + 1, rng)

    # ------------------------------------------------------------------

    def bridge_vision(self, tokens: Tensor) -> Tensor:
        """Encoder tokens (B, N, K) -> decoder width (B, N, D)."""
        if self.bridge is None:
            return tokens
        return self.bridge(tokens)

    def _tile(self, vec: Tensor, b: int, n: int) -> Tensor:
        d = self.cfg.embed_dim
        return ag.add(ag.reshape(vec, (1, 1, d)),
                      Tensor(np.zeros((b, n, d), dtype=vec.dtype)))

    def queries(self, b: int, length: int) -> Tensor:
        """Positional query stream (B, length, D)."""
        d = self.cfg.embed_dim
        q = ag.reshape(ag.narrow(self.pos_emb, 0, 0, length), (1, length, d))
        return ag.add(q, Tensor(np.zeros((b, length, d), dtype=self.pos_emb.dtype)))

    def context(self, target_ids: np.ndarray) -> Tensor:
        """BOS slot + embedded target characters with their positions.

        target_ids: (B, L) ints in [0, pad_id]. Output (B, L+1, D); column 0
        is the BOS slot.
        """
        b, l = target_ids.shape
        d = self.cfg.embed_dim
        ce = ag.embedding(self.char_emb, target_ids)
        pe = ag.reshape(ag.narrow(self.pos_emb, 0, 0, l), (1, l, d))
        return ag.concat([self._tile(self.bos, b, 1), ag.add(ce, pe)], axis=1)

    def forward(self, queries: Tensor, context: Tensor, vision: Tensor,
                ctx_visible: np.ndarray,
                capture: Optional[list] = None) -> Tensor:
        """-> logits (B, Lq, charset+1). ctx_visible: (B, Lq, Lc) or (Lq, Lc)."""
        x = queries
        for block in self.blocks:
            x = block(x, context, vision, ctx_visible, capture)
        return self.head(self.final_ln(x))

    # ------------------------------------------------------------------
    # training

    def build_batch_masks(self, l_effs: list, perms: list, lmax: int) -> np.ndarray:
        """Visibility tensor (B*K, lmax, lmax+1) for a batch of samples.

        perms: list of per-sample lists, each with the same number K of
        Permutations over that sample's l_eff. Column 0 (BOS) is visible to
        every query row, including padded rows, so no row is left without
        support; padded rows carry zero loss weight anyway.
        """
        k = len(perms[0])
        vis = np.zeros((len(l_effs) * k, lmax, lmax + 1), dtype=bool)
        vis[:, :, 0] = True
        row = 0
        for leff, sample_perms in zip(l_effs, perms):
            if len(sample_perms) != k:
                raise ValueError("every sample needs the same permutation count")
            for perm in sample_perms:
                if len(perm) != leff:
                    raise ValueError(
                        f"permutation length {len(perm)} != l_eff {leff}"
                    )
                vis[row, :leff, 1 : leff + 1] = context_visibility(perm)
                row += 1
        return vis

    def plm_loss(self, vision: Tensor, labels: list, perms: list):
        """Permutation-averaged teacher-forced loss.

        vision: bridged tokens (B, N, D). labels: per sample, the char ids
        (no EOS). perms: per sample, K Permutations over len(label)+1. The
        loss is the mean over the K orderings of the mean over samples of
        the per-position mean cross entropy; EOS occupies the final position
        of each sample, PAD positions carry zero weight.

        Returns (loss Tensor, info dict) where info has the per-ordering
        loss components and teacher-forced char accuracy under the identity
        ordering.
        """
        b = vision.shape[0]
        if len(labels) != b or len(perms) != b:
            raise ValueError("labels/perms must match the batch size")
        if any(len(lab) == 0 for lab in labels):
            raise ValueError("empty label")
        k = len(perms[0])
        l_effs = [len(lab) + 1 for lab in labels]
        lmax = max(l_effs)
        if lmax > self.cfg.max_len + 1:
            raise ValueError(f"label longer than max_len {self.cfg.max_len}")

        targets = np.full((b, lmax), self.pad_id, dtype=np.int64)
        for s, lab in enumerate(labels):
            targets[s, : len(lab)] = lab
            targets[s, len(lab)] = self.eos_id

        rep = np.repeat(np.arange(b), k)
        queries = self.queries(b * k, lmax)
        context = ag.take_rows(self.context(targets), rep, axis=0)
        vision_rep = ag.take_rows(vision, rep, axis=0)
        visible = self.build_batch_masks(l_effs, perms, lmax)

        logits = self.forward(queries, context, vision_rep, visible)
        v = self.n_chars + 1
        logits_by_perm = ag.reshape(logits, (b, k, lmax, v))

        # per-position weights: mean over positions, then mean over samples
        w = np.zeros((b, lmax), dtype=vision.dtype)
        for s, leff in enumerate(l_effs):
            w[s, :leff] = 1.0 / (leff * b)
        w_flat = w.reshape(-1)
        t_flat = targets.reshape(-1)
        # PAD rows carry zero weight; point them at a valid class id so the
        # logit gather stays in range
        t_flat = np.where(w_flat > 0, t_flat, 0)

        components = []
        acc = None
        for j in range(k):
            lj = ag.reshape(ag.narrow(logits_by_perm, 1, j, 1), (b * lmax, v))
            components.append(ag.cross_entropy_weighted(lj, t_flat, w_flat))
            if j == 0:
                pred = lj.data.argmax(axis=1)
                live = w_flat > 0
                acc = float((pred[live] == t_flat[live]).mean())

        loss = components[0]
        for c in components[1:]:
            loss = ag.add(loss, c)
        loss = ag.scale(loss, 1.0 / k)
        info = {
            "components": [float(c.data) for c in components],
            "teacher_acc": acc,
        }
        return loss, info

    # ------------------------------------------------------------------
    # inference

    def decode_step(self, vision: Tensor, prefix_ids: list, t: int,
                    capture: Optional[list] = None) -> np.ndarray:
        """Identity-order logits for position t given the decoded prefix.

        vision: bridged tokens (1, N, D). Returns logits (charset+1,).
        """
        if t > self.cfg.max_len:
            raise ValueError(f"step {t} beyond max_len {self.cfg.max_len}")
        d = self.cfg.embed_dim
        q = ag.reshape(ag.narrow(self.pos_emb, 0, t, 1), (1, 1, d))
        if prefix_ids:
            ids = np.asarray(prefix_ids, dtype=np.int64)[None, :]
            ctx = self.context(ids)
        else:
            ctx = self._tile(self.bos, 1, 1)
        visible = np.ones((1, ctx.shape[1]), dtype=bool)
        logits = self.forward(q, ctx, vision, visible, capture)
        return logits.data[0, 0]
