"""End-to-end recognizer: cascaded encoder + permuted-language decoder over
a shared parameter store."""

from typing import Optional

import numpy as np

from . import autograd as ag
from . import nn
from .config import (ModelSettings, ValidatedConfig, build_configs,
                     settings_from_dict, token_schedule)
from .data import DEFAULT_CHARSET, Charset
from .decoder import PLDDecoder, sample_permutations
from .encoder import CascadeEncoder, TokenState


class TextRecognizer:
    def __init__(self, settings: ModelSettings, dtype=np.float32):
        self.settings = settings
        vc: ValidatedConfig = build_configs(settings)
        self.enc_cfg = vc.encoder
        self.dec_cfg = vc.decoder
        self.charset = (DEFAULT_CHARSET if settings.charset is None
                        else Charset(settings.charset))
        self.store = nn.ParamStore(dtype)
        init_rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 0]))
        self.encoder = CascadeEncoder(self.enc_cfg, self.store, init_rng)
        self.decoder = PLDDecoder(self.dec_cfg, self.store, init_rng,
                                  enc_dim=self.enc_cfg.embed_dim)

    # ------------------------------------------------------------------

    def encode(self, images: np.ndarray, reduction: int = 2) -> TokenState:
        return self.encoder(images, reduction=reduction)

    def encode_bridged(self, images: np.ndarray, reduction: int = 2) -> TokenState:
        state = self.encode(images, reduction=reduction)
        return TokenState(self.decoder.bridge_vision(state.tokens),
                          state.retained, state.grid_hw, state.grid_intact)

    def loss(self, images: np.ndarray, labels: list, n_perms: int,
             perm_rng: np.random.Generator):
        """Training loss on a batch. labels: list of char-id lists."""
        state = self.encode_bridged(images)
        perms = [sample_permutations(n_perms, len(lab) + 1, perm_rng)
                 for lab in labels]
        return self.decoder.plm_loss(state.tokens, labels, perms)

    def schedule(self, reduction: int = 2):
        return token_schedule(self.enc_cfg, reduction)

    # ------------------------------------------------------------------

    def config_snapshot(self) -> dict:
        return self.settings.to_dict()

    @classmethod
    def from_snapshot(cls, snapshot: dict, dtype=np.float32) -> "TextRecognizer":
        return cls(settings_from_dict(snapshot), dtype=dtype)

    def param_signature(self) -> list:
        """Names and shapes, the compatibility contract for checkpoints."""
        return [(name, tuple(t.data.shape)) for name, t in self.store.items()]
