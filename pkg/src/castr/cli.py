"""Command-line entry point.

Subcommands: gen-data, train, eval, infer, flops, attn. A JSON config file
(--config) supplies model settings; explicit flags override it. Exit codes:
0 success, 1 usage error, 2 runtime error. Long-running subcommands write a
run manifest (resolved config, seed, command line, timestamp) before
starting work.
"""

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, ModelSettings, settings_from_dict
from .data import (Charset, DataError, DEFAULT_CHARSET, PRINTABLE, augment,
                   generate_corpus, load_images, load_manifest, read_image)
from .flops import render_table, report
from .inference import evaluate, export_attention, greedy_decode
from .model import TextRecognizer
from .trainer import (CheckpointError, TrainConfig, load_checkpoint, train)


class UsageError(ValueError):
    pass


def _write_run_manifest(out_dir: str, command: str, argv: list, payload: dict):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        **payload,
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w",
              encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_settings(args) -> ModelSettings:
    """Config file first, then explicit flags on top."""
    base = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            base = json.load(f)
    st = settings_from_dict(base)
    for key in ("encoder_spec", "decoder_blocks", "decoder_dim", "decoder_heads",
                "patch", "image_h", "image_w", "charset", "max_len",
                "selection_scheme", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(st, key, val)
    return st


def _model_charset(st: ModelSettings) -> Charset:
    return DEFAULT_CHARSET if st.charset is None else Charset(st.charset)


def _load_dataset(manifest: str, charset: Charset, max_len: int):
    records = load_images(load_manifest(manifest, charset, max_len))
    images = np.stack([r.image for r in records])
    return images, [r.label for r in records]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args, argv):
    charset = Charset(args.charset) if args.charset else DEFAULT_CHARSET
    _write_run_manifest(args.out, "gen-data", argv, {
        "seed": args.seed,
        "count": args.count,
        "len_range": [args.min_len, args.max_len],
        "canvas": args.canvas,
        "charset": charset.symbols,
        "alphabet": args.alphabet,
    })
    manifest = generate_corpus(args.out, args.count, args.seed, charset,
                               len_range=(args.min_len, args.max_len),
                               canvas=args.canvas, alphabet=args.alphabet)
    print(manifest)
    return 0


def _cmd_train(args, argv):
    st = _load_settings(args)
    charset = _model_charset(st)
    images, label_texts = _load_dataset(args.manifest, charset, st.max_len)
    labels = [charset.encode(t) for t in label_texts]
    if images.shape[1] != st.image_h or images.shape[2] != st.image_w:
        images = np.stack([
            augment(img, np.random.default_rng(0), (0, 0), (0, 0),
                    out_hw=(st.image_h, st.image_w))
            for img in images
        ])
    tc = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        n_perms=args.perms,
        warmup=args.warmup,
        log_every=args.log_every,
        checkpoint_every=args.checkpoint_every,
        seed=st.seed,
        timing=args.timing,
        augment_blur=(0.0, args.blur),
        augment_noise=(0.0, args.noise),
        augment_scale=(args.scale_jitter, 1.0),
    )
    _write_run_manifest(args.out, "train", argv, {
        "seed": st.seed,
        "model": st.to_dict(),
        "train": {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in vars(tc).items()},
        "manifest": os.path.abspath(args.manifest),
    })
    model = TextRecognizer(st)
    result = train(model, images, labels, tc, args.out)
    if result.diverged:
        print(f"training diverged after {result.steps_done} steps; "
              f"last checkpoint: {result.checkpoint}", file=sys.stderr)
        return 2
    print(result.checkpoint)
    return 0


def _cmd_eval(args, argv):
    model, _ = load_checkpoint(args.checkpoint)
    images, labels = _load_dataset(args.manifest, model.charset,
                                   model.dec_cfg.max_len)
    h, w = model.enc_cfg.image_size
    if images.shape[1] != h or images.shape[2] != w:
        images = np.stack([
            augment(img, np.random.default_rng(0), (0, 0), (0, 0), out_hw=(h, w))
            for img in images
        ])
    res = evaluate(model, images, labels, normalize=args.normalize)
    out = {"n": res["n"], "correct": res["correct"], "word_acc": res["word_acc"]}
    print(json.dumps(out))
    return 0


def _cmd_infer(args, argv):
    model, _ = load_checkpoint(args.checkpoint)
    img = read_image(args.image)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    h, w = model.enc_cfg.image_size
    if img.shape != (h, w):
        img = augment(img, np.random.default_rng(0), (0, 0), (0, 0), out_hw=(h, w))
    text = greedy_decode(model, img)
    if args.json:
        print(json.dumps({"text": text}))
    else:
        print(text)
    return 0


def _cmd_flops(args, argv):
    rep = report(args.spec, decoder=args.decoder, patch=args.patch,
                 image_size=(args.image_h or 224, args.image_w or 224),
                 passes=args.passes)
    if args.json:
        print(json.dumps({
            "params_encoder": rep.params_encoder,
            "params_decoder": rep.params_decoder,
            "gflops_encoder": rep.gflops_encoder,
            "gflops_decoder": rep.gflops_decoder,
            "gflops_total": rep.gflops_total,
            "convention": rep.convention,
        }))
    else:
        print(render_table(rep, args.spec))
    return 0


def _cmd_attn(args, argv):
    model, _ = load_checkpoint(args.checkpoint)
    img = read_image(args.image)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    h, w = model.enc_cfg.image_size
    if img.shape != (h, w):
        img = augment(img, np.random.default_rng(0), (0, 0), (0, 0), out_hw=(h, w))
    maps = export_attention(model, img, args.out)
    print(json.dumps({"text": maps.text, "chars": len(maps.grids),
                      "out": args.out}))
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="castr",
                                description="cascaded-transformer text recognition")
    sub = p.add_subparsers(dest="command")

    def add_model_flags(sp):
        sp.add_argument("--config", help="JSON settings file")
        sp.add_argument("--encoder-spec", dest="encoder_spec")
        sp.add_argument("--decoder-blocks", dest="decoder_blocks", type=int)
        sp.add_argument("--decoder-dim", dest="decoder_dim", type=int)
        sp.add_argument("--decoder-heads", dest="decoder_heads", type=int)
        sp.add_argument("--patch", type=int)
        sp.add_argument("--image-h", dest="image_h", type=int)
        sp.add_argument("--image-w", dest="image_w", type=int)
        sp.add_argument("--charset")
        sp.add_argument("--max-len", dest="max_len", type=int)
        sp.add_argument("--selection-scheme", dest="selection_scheme",
                        choices=("first_n", "avg_pool_1d", "max_pool_1d",
                                 "conv2d_stride"))
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate a glyph corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-len", type=int, default=1)
    g.add_argument("--max-len", type=int, default=5)
    g.add_argument("--canvas", type=int, default=64)
    g.add_argument("--charset", default=None)
    g.add_argument("--alphabet", default=None,
                   help="restrict sampled symbols to this subset")

    t = sub.add_parser("train", help="train a model")
    add_model_flags(t)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--perms", type=int, default=4)
    t.add_argument("--warmup", type=int, default=0)
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--blur", type=float, default=0.0,
                   help="max augmentation blur sigma")
    t.add_argument("--noise", type=float, default=0.0,
                   help="max augmentation noise std")
    t.add_argument("--scale-jitter", type=float, default=1.0,
                   help="min augmentation rescale factor (range up to 1.0)")
    t.add_argument("--timing", action="store_true",
                   help="add wall_ms to metrics rows (non-deterministic)")

    e = sub.add_parser("eval", help="word accuracy on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--normalize", action="store_true")
    e.add_argument("--seed", type=int)

    i = sub.add_parser("infer", help="decode one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--json", action="store_true")
    i.add_argument("--seed", type=int)

    f = sub.add_parser("flops", help="parameter/GFLOPs report")
    f.add_argument("--spec", required=True)
    f.add_argument("--decoder", default=None)
    f.add_argument("--patch", type=int, default=16)
    f.add_argument("--image-h", dest="image_h", type=int)
    f.add_argument("--image-w", dest="image_w", type=int)
    f.add_argument("--passes", type=int, default=4)
    f.add_argument("--json", action="store_true")
    f.add_argument("--seed", type=int)

    a = sub.add_parser("attn", help="export per-character attention maps")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)

    return p


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "flops": _cmd_flops,
    "attn": _cmd_attn,
}


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage problems and 0 on --help
        return 0 if e.code == 0 else 1
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args, list(argv))
    except (ConfigError, DataError, CheckpointError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
