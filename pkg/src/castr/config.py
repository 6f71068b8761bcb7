"""Model specification parsing, validation, and token schedules.

Spec-string grammar:

    e-<variant>                      standard encoder, single stage
    e-cc(i:j:...:k)-<variant>        cascaded encoder, one stage per entry

where <variant> is one of the named sizes (tiny, small, base) or a custom
``dim,heads,blocks`` triple such as ``64,4,4``. An optional ``+d1`` / ``+d2``
suffix names the decoder depth. Block counts inside cc(...) must sum to the
variant's total depth: the cascade regroups blocks, it never adds or removes
parameters.
"""

import math
import re
from dataclasses import dataclass, field

NAMED_VARIANTS = {
    # name -> (embed_dim, heads, total_blocks)
    "tiny": (192, 3, 12),
    "small": (384, 6, 12),
    "base": (768, 12, 12),
}

# decoders are canonically named by block count; the historical size-style
# aliases map onto them
DECODER_ALIASES = {"d1": 1, "d2": 2, "d-tiny": 1, "d-small": 1, "d-base": 2}

SELECTION_SCHEMES = ("first_n", "avg_pool_1d", "max_pool_1d", "conv2d_stride")


class ConfigError(ValueError):
    """Carries a list of human-readable constraint violations."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class EncoderConfig:
    variant_name: str = "base"
    patch_size: int = 16
    embed_dim: int = 768
    heads: int = 12
    blocks_per_stage: tuple = (12,)
    selection_scheme: str = "first_n"
    image_size: tuple = (224, 224)

    @property
    def stages(self) -> int:
        return len(self.blocks_per_stage)

    @property
    def total_blocks(self) -> int:
        return sum(self.blocks_per_stage)

    @property
    def is_cascaded(self) -> bool:
        return self.stages > 1

    @property
    def grid_hw(self) -> tuple:
        h, w = self.image_size
        return h // self.patch_size, w // self.patch_size

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid_hw
        return gh * gw

    @property
    def n_tokens(self) -> int:
        """Initial token count: patches plus the CLS token."""
        return self.n_patches + 1


@dataclass(frozen=True)
class DecoderConfig:
    blocks: int = 1
    embed_dim: int = 768
    heads: int = 12
    max_len: int = 25
    charset_size: int = 94


@dataclass(frozen=True)
class TokenSchedule:
    """Token counts per cascade stage.

    ``counts[i]`` is the number of tokens entering stage i; reduction happens
    between stages, so the last entry is also the encoder's output length.
    The single-stage (standard) encoder is represented as (N0, N0) to make
    the absence of reduction explicit.
    """

    counts: tuple

    @property
    def n0(self) -> int:
        return self.counts[0]

    @property
    def final(self) -> int:
        return self.counts[-1]

    def __iter__(self):
        return iter(self.counts)

    def __len__(self):
        return len(self.counts)


_SPEC_RE = re.compile(r"^e-(?:cc\(([0-9:]+)\)-)?(.+)$")


def _parse_variant(token: str):
    if token in NAMED_VARIANTS:
        dim, heads, total = NAMED_VARIANTS[token]
        return token, dim, heads, total
    parts = token.split(",")
    if len(parts) == 3:
        try:
            dim, heads, total = (int(p) for p in parts)
        except ValueError:
            raise ConfigError([f"malformed custom variant {token!r} (want dim,heads,blocks)"])
        if dim <= 0 or heads <= 0 or total <= 0:
            raise ConfigError([f"custom variant fields must be positive, got {token!r}"])
        return "custom", dim, heads, total
    raise ConfigError([f"unknown variant {token!r}"])


def parse_model_spec(text: str):
    """Parse a spec string -> (EncoderConfig, decoder-name or None)."""
    s = text.strip()
    decoder = None
    if "+" in s:
        s, _, tail = s.partition("+")
        tail = tail.strip()
        if tail not in DECODER_ALIASES:
            raise ConfigError([f"unknown decoder name {tail!r}"])
        decoder = f"d{DECODER_ALIASES[tail]}"
        s = s.strip()
    m = _SPEC_RE.match(s)
    if not m:
        raise ConfigError(
            [f"spec string {text!r} does not match 'e-<variant>' or 'e-cc(i:j)-<variant>'"]
        )
    cc, variant_token = m.groups()
    name, dim, heads, total = _parse_variant(variant_token)
    if cc is not None:
        try:
            stage_blocks = [int(p) for p in cc.split(":")]
        except ValueError:
            raise ConfigError([f"malformed cascade notation cc({cc})"])
        if any(b <= 0 for b in stage_blocks):
            raise ConfigError([f"non-positive block count in cc({cc})"])
        if sum(stage_blocks) != total:
            raise ConfigError([f"blocks sum {sum(stage_blocks)} ≠ {total}"])
        bps = tuple(stage_blocks)
    else:
        bps = (total,)
    enc = EncoderConfig(variant_name=name, embed_dim=dim, heads=heads,
                        blocks_per_stage=bps)
    return enc, decoder


def format_model_spec(cfg: EncoderConfig, decoder: str = None) -> str:
    """Canonical spec string for a config; inverse of parse_model_spec."""
    if cfg.variant_name in NAMED_VARIANTS:
        variant = cfg.variant_name
    else:
        variant = f"{cfg.embed_dim},{cfg.heads},{cfg.total_blocks}"
    if cfg.is_cascaded:
        cc = ":".join(str(b) for b in cfg.blocks_per_stage)
        body = f"e-cc({cc})-{variant}"
    else:
        body = f"e-{variant}"
    return f"{body}+{decoder}" if decoder else body


def token_schedule(cfg: EncoderConfig, reduction: int = 2) -> TokenSchedule:
    """Per-stage token counts under successive ceil-division reductions.

    `reduction` is the division factor between stages (2 = halving). The
    value 1 disables reduction entirely, which makes a cascaded encoder
    compute exactly what the standard one does; equivalence tests rely on
    this hook.
    """
    n0 = cfg.n_tokens
    if cfg.stages == 1:
        return TokenSchedule((n0, n0))
    counts = [n0]
    n = n0
    for _ in range(cfg.stages - 1):
        n = math.ceil(n / reduction)
        if n < 2:
            raise ConfigError(
                [f"schedule drives token count below 2 (got {n} from N0={n0})"]
            )
        counts.append(n)
    return TokenSchedule(tuple(counts))


@dataclass(frozen=True)
class ValidatedConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig


def validate(enc: EncoderConfig, dec: DecoderConfig) -> ValidatedConfig:
    """Check every structural invariant; raise ConfigError listing all
    violations at once."""
    v = []
    if enc.embed_dim % enc.heads != 0:
        v.append(f"dim not divisible by heads ({enc.embed_dim} % {enc.heads} != 0)")
    h, w = enc.image_size
    if h % enc.patch_size != 0 or w % enc.patch_size != 0:
        v.append(f"image size {enc.image_size} not divisible by patch {enc.patch_size}")
    if len(enc.blocks_per_stage) < 1:
        v.append("blocks_per_stage is empty")
    if any(b <= 0 for b in enc.blocks_per_stage):
        v.append(f"non-positive block count in {enc.blocks_per_stage}")
    if enc.variant_name in NAMED_VARIANTS:
        dim, heads, total = NAMED_VARIANTS[enc.variant_name]
        if (enc.embed_dim, enc.heads) != (dim, heads):
            v.append(
                f"named variant {enc.variant_name!r} requires dim={dim}, heads={heads}"
            )
        if enc.total_blocks != total:
            v.append(f"blocks sum {enc.total_blocks} ≠ {total}")
    if enc.selection_scheme not in SELECTION_SCHEMES:
        v.append(f"unknown selection scheme {enc.selection_scheme!r}")
    if dec.blocks < 1:
        v.append(f"decoder blocks must be ≥ 1, got {dec.blocks}")
    if dec.embed_dim % dec.heads != 0:
        v.append(f"decoder dim not divisible by heads ({dec.embed_dim} % {dec.heads})")
    if dec.max_len < 1:
        v.append(f"max_len must be ≥ 1, got {dec.max_len}")
    if dec.charset_size < 2:
        v.append(f"charset_size must be ≥ 2, got {dec.charset_size}")
    if v:
        raise ConfigError(v)
    return ValidatedConfig(enc, dec)


# ---------------------------------------------------------------------------
# JSON-level settings (the CLI config file schema)

_SETTINGS_KEYS = (
    "encoder_spec", "decoder_blocks", "decoder_dim", "decoder_heads",
    "patch", "image_h", "image_w", "charset", "max_len",
    "selection_scheme", "seed",
)


@dataclass
class ModelSettings:
    encoder_spec: str = "e-base"
    decoder_blocks: int = 1
    decoder_dim: int = 768
    decoder_heads: int = 12
    patch: int = 16
    image_h: int = 224
    image_w: int = 224
    charset: str = None  # None -> full 94-symbol printable set
    max_len: int = 25
    selection_scheme: str = "first_n"
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in _SETTINGS_KEYS}


def settings_from_dict(d: dict) -> ModelSettings:
    unknown = set(d) - set(_SETTINGS_KEYS)
    if unknown:
        raise ConfigError([f"unknown config key {k!r}" for k in sorted(unknown)])
    return ModelSettings(**d)


def build_configs(st: ModelSettings) -> ValidatedConfig:
    """Resolve settings into a validated (encoder, decoder) config pair."""
    enc, dec_name = parse_model_spec(st.encoder_spec)
    enc = EncoderConfig(
        variant_name=enc.variant_name,
        patch_size=st.patch,
        embed_dim=enc.embed_dim,
        heads=enc.heads,
        blocks_per_stage=enc.blocks_per_stage,
        selection_scheme=st.selection_scheme,
        image_size=(st.image_h, st.image_w),
    )
    blocks = DECODER_ALIASES[dec_name] if dec_name else st.decoder_blocks
    charset_size = 94 if st.charset is None else len(st.charset)
    dec = DecoderConfig(
        blocks=blocks,
        embed_dim=st.decoder_dim,
        heads=st.decoder_heads,
        max_len=st.max_len,
        charset_size=charset_size,
    )
    return validate(enc, dec)
