"""Closed-form parameter and forward-FLOPs accounting.

Counting convention (recorded in every CostReport):

- Parameters are exact integer counts of every stored tensor.
- FLOPs = 2 x multiply-accumulates of the *linear projections* inside
  transformer blocks: QKV, attention output, and the two MLP layers. The
  attention score and value products, patch embedding, classifier head,
  bridge, and all normalization/activation element-ops are excluded. This
  is the convention under which the reference complexity figures for every
  encoder size and patch size are reproduced within tolerance; including
  the quadratic attention terms overshoots the small-patch cells badly.
- Decoder FLOPs cover the per-block projections of both cross-attentions
  (context length L+2 including the BOS slot, vision length N_vis) and the
  MLP, times blocks, times `passes` forward passes (default 4, mirroring
  the multi-ordering training mode).
"""

from dataclasses import dataclass

from .config import (DecoderConfig, EncoderConfig, TokenSchedule,
                     parse_model_spec, token_schedule, validate)

MAC = 2  # FLOPs per multiply-accumulate


@dataclass
class CostReport:
    params_encoder: int
    params_decoder: int
    gflops_encoder: float
    gflops_decoder: float
    convention: str

    @property
    def gflops_total(self) -> float:
        return self.gflops_encoder + self.gflops_decoder


CONVENTION = (
    "FLOPs=2*MACs over transformer-block linear projections (QKV, attention "
    "out, MLP); attention score/value products, patch embed, bridge, head, "
    "norms and activations excluded; decoder counted over {passes} passes"
)


def count_encoder_params(enc: EncoderConfig) -> int:
    k = enc.embed_dim
    p = enc.patch_size
    patch_embed = (3 * p * p) * k + k
    cls = k
    pos = enc.n_tokens * k
    per_block = 12 * k * k + 13 * k  # q,k,v,o + 4x MLP + two layer norms
    final_ln = 2 * k
    total = patch_embed + cls + pos + enc.total_blocks * per_block + final_ln
    if enc.selection_scheme == "conv2d_stride" and enc.is_cascaded:
        total += 2 * k * k + k
    return total


def count_decoder_params(dec: DecoderConfig, enc_dim: int = None) -> int:
    d = dec.embed_dim
    v = dec.charset_size
    char_emb = (v + 2) * d            # chars + EOS + PAD rows
    pos = (dec.max_len + 1) * d
    bos = d
    per_block = 16 * d * d + 19 * d   # two attentions + MLP + three norms
    final_ln = 2 * d
    head = d * (v + 1) + (v + 1)
    total = char_emb + pos + bos + dec.blocks * per_block + final_ln + head
    if enc_dim is not None and enc_dim != d:
        total += enc_dim * d + d      # bridge
    return total


def count_params(enc: EncoderConfig, dec: DecoderConfig) -> tuple:
    """(encoder params, decoder params); the bridge, when needed, counts on
    the decoder side."""
    return (count_encoder_params(enc),
            count_decoder_params(dec, enc_dim=enc.embed_dim))


def count_encoder_flops(enc: EncoderConfig,
                        schedule: TokenSchedule = None) -> float:
    """GFLOPs of one encoder forward pass under the stated convention."""
    if schedule is None:
        schedule = token_schedule(enc)
    k = enc.embed_dim
    macs = 0
    for blocks, n in zip(enc.blocks_per_stage, schedule.counts):
        macs += blocks * n * 12 * k * k
    return MAC * macs / 1e9


def count_decoder_flops(dec: DecoderConfig, n_vis: int, l: int = None,
                        passes: int = 4) -> float:
    """GFLOPs of `passes` decoder forward passes.

    Per block, per pass: queries length Lq = l+1, context length Lq+1 (BOS),
    vision length n_vis; projections only, so the total is exactly linear in
    both blocks and passes.
    """
    if l is None:
        l = dec.max_len
    d = dec.embed_dim
    lq = l + 1
    lc = lq + 1
    per_block = (12 * lq + 2 * lc + 2 * n_vis) * d * d
    return MAC * passes * dec.blocks * per_block / 1e9


def report(spec: str, decoder: str = None, patch: int = None,
           image_size: tuple = None, passes: int = 4,
           max_len: int = 25, charset_size: int = 94) -> CostReport:
    """Compose the counters for a spec string like 'e-cc(6:6)-base+d1'."""
    enc, dec_name = parse_model_spec(spec)
    if decoder is not None:
        dec_name = decoder
    if dec_name is None:
        dec_name = "d1"
    from .config import DECODER_ALIASES
    if dec_name not in DECODER_ALIASES:
        raise ValueError(f"unknown decoder {dec_name!r}")
    overrides = {}
    if patch is not None:
        overrides["patch_size"] = patch
    if image_size is not None:
        overrides["image_size"] = tuple(image_size)
    if overrides:
        from dataclasses import replace
        enc = replace(enc, **overrides)
    dec = DecoderConfig(blocks=DECODER_ALIASES[dec_name], max_len=max_len,
                        charset_size=charset_size)
    validate(enc, dec)
    sched = token_schedule(enc)
    pe, pd = count_params(enc, dec)
    return CostReport(
        params_encoder=pe,
        params_decoder=pd,
        gflops_encoder=count_encoder_flops(enc, sched),
        gflops_decoder=count_decoder_flops(dec, sched.final, passes=passes),
        convention=CONVENTION.format(passes=passes),
    )


def render_table(rep: CostReport, spec: str) -> str:
    """Plain-text table in the style of a complexity summary row."""
    lines = [
        f"{'component':<12} {'params':>12} {'GFLOPs':>10}",
        f"{'-' * 12} {'-' * 12} {'-' * 10}",
        f"{'encoder':<12} {rep.params_encoder:>12,} {rep.gflops_encoder:>10.2f}",
        f"{'decoder':<12} {rep.params_decoder:>12,} {rep.gflops_decoder:>10.2f}",
        f"{'total':<12} {rep.params_encoder + rep.params_decoder:>12,} "
        f"{rep.gflops_total:>10.2f}",
        "",
        f"spec: {spec}",
        f"convention: {rep.convention}",
    ]
    return "\n".join(lines)
