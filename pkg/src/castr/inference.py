"""Greedy decoding, word accuracy, attention-map export."""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data import write_pgm
from .encoder import CLS_SOURCE, TokenState
from .model import TextRecognizer


def greedy_decode(model: TextRecognizer, image: np.ndarray,
                  capture: list = None) -> str:
    """Left-to-right argmax decoding until EOS or the length cap.

    Ties break toward the lowest id (argmax convention). An EOS at the very
    first step is overridden by the best non-EOS symbol so the output is
    never empty. If `capture` is a list, the vision cross-attention
    probabilities of every kept step are appended, one sublist per emitted
    character.
    """
    eos = model.decoder.eos_id
    max_len = model.dec_cfg.max_len
    with ag.no_grad():
        state = model.encode_bridged(image[None])
        out: list = []
        for t in range(max_len + 1):
            step_capture: list = [] if capture is not None else None
            logits = model.decoder.decode_step(state.tokens, out, t, step_capture)
            pick = int(np.argmax(logits))
            if pick == eos and t == 0:
                pick = int(np.argmax(logits[:eos]))
            if pick == eos or len(out) >= max_len:
                break
            out.append(pick)
            if capture is not None:
                capture.append(step_capture)
    return model.charset.decode(out)


def normalize_text(s: str) -> str:
    return "".join(ch for ch in s.lower() if ch.isalnum())


def word_accuracy(preds: list, refs: list, normalize: bool = False) -> float:
    """Exact full-string match rate."""
    if len(preds) != len(refs):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(refs)} refs")
    if not refs:
        raise ValueError("empty evaluation set")
    if normalize:
        preds = [normalize_text(p) for p in preds]
        refs = [normalize_text(r) for r in refs]
    correct = sum(1 for p, r in zip(preds, refs) if p == r)
    return correct / len(refs)


@dataclass
class AttentionMapSet:
    text: str
    grids: list          # one (gh, gw) float array per emitted character
    cls_masses: list     # attention mass on the CLS token per character
    grid_hw: tuple


def attention_grids(model: TextRecognizer, image: np.ndarray) -> AttentionMapSet:
    """Decode greedily and scatter per-character vision attention onto the
    patch grid.

    For each emitted character the vision cross-attention weights are
    averaged over heads and decoder blocks, then each retained token's
    weight is distributed uniformly over its source patches; discarded
    patches keep zero. Entries are nonnegative and each grid sums to at most
    1 (exactly 1 - CLS mass when no token was discarded).
    """
    capture: list = []
    text = greedy_decode(model, image, capture=capture)
    with ag.no_grad():
        state = model.encode_bridged(image[None])
    # retained maps always index the original patch grid
    gh, gw = model.enc_cfg.grid_hw
    retained = state.retained

    grids = []
    cls_masses = []
    for step_probs in capture:
        # each entry: (1, heads, 1, N) probabilities from one block
        stack = np.concatenate([p[0, :, 0, :] for p in step_probs], axis=0)
        weights = stack.mean(axis=0)
        grid = np.zeros(gh * gw, dtype=np.float64)
        cls_mass = 0.0
        for tok, srcs in enumerate(retained):
            w = float(weights[tok])
            if srcs == (CLS_SOURCE,):
                cls_mass += w
                continue
            share = w / len(srcs)
            for s in srcs:
                grid[s] += share
        grids.append(grid.reshape(gh, gw))
        cls_masses.append(cls_mass)
    return AttentionMapSet(text=text, grids=grids, cls_masses=cls_masses,
                           grid_hw=(gh, gw))


def export_attention(model: TextRecognizer, image: np.ndarray,
                     out_dir: str) -> AttentionMapSet:
    """Write one normalized PGM per decoded character plus an index JSON."""
    maps = attention_grids(model, image)
    os.makedirs(out_dir, exist_ok=True)
    index = {
        "text": maps.text,
        "grid_h": maps.grid_hw[0],
        "grid_w": maps.grid_hw[1],
        "chars": [],
    }
    for i, (ch, grid, cls_mass) in enumerate(
            zip(maps.text, maps.grids, maps.cls_masses)):
        peak = float(grid.max())
        scaled = grid / peak if peak > 0 else grid
        name = f"char_{i:02d}.pgm"
        write_pgm(os.path.join(out_dir, name), scaled)
        index["chars"].append({
            "char": ch,
            "file": name,
            "cls_mass": cls_mass,
            "scale": peak,
        })
    with open(os.path.join(out_dir, "attention.json"), "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2)
        f.write("\n")
    return maps


def evaluate(model: TextRecognizer, images: np.ndarray, labels: list,
             normalize: bool = False) -> dict:
    """Greedy-decode a dataset; labels are reference strings."""
    preds = []
    for i in range(images.shape[0]):
        img = images[i]
        if img.dtype == np.uint8:
            img = img.astype(np.float32) / 255.0
        preds.append(greedy_decode(model, img))
    acc = word_accuracy(preds, labels, normalize=normalize)
    correct = round(acc * len(labels))
    return {"n": len(labels), "correct": correct, "word_acc": acc,
            "preds": preds}
