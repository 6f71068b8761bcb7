import json
import os

import numpy as np
import pytest

from castr.data import read_image
from castr.inference import (attention_grids, evaluate, export_attention,
                             greedy_decode, normalize_text, word_accuracy)
from conftest import toy_model


# ---------------------------------------------------------------------------
# text metrics


def test_normalize_text():
    assert normalize_text("Ab-3 x!") == "ab3x"
    assert normalize_text("...") == ""


def test_word_accuracy_exact():
    assert word_accuracy(["ab", "cd"], ["ab", "cd"]) == 1.0
    assert word_accuracy(["ab", "cd", "x", "y"], ["ab", "cd", "x", "z"]) == 0.75
    assert word_accuracy(["AB"], ["ab"]) == 0.0
    assert word_accuracy(["A-B"], ["ab"], normalize=True) == 1.0


def test_word_accuracy_validates_inputs():
    with pytest.raises(ValueError, match="length mismatch: 1 preds vs 2"):
        word_accuracy(["a"], ["a", "b"])
    with pytest.raises(ValueError, match="empty evaluation set"):
        word_accuracy([], [])


# ---------------------------------------------------------------------------
# greedy decoding on an untrained model


def test_decode_output_is_valid(rng):
    model = toy_model()
    for i in range(4):
        text = greedy_decode(model, rng.random((32, 32), dtype=np.float32))
        assert 1 <= len(text) <= model.dec_cfg.max_len
        assert all(ch in model.charset.symbols for ch in text)


def test_decode_never_empty_even_when_eos_wins(rng):
    # bias the head so EOS has by far the largest logit everywhere
    model = toy_model()
    model.store["dec.head.b"].data[model.decoder.eos_id] = 50.0
    text = greedy_decode(model, rng.random((32, 32), dtype=np.float32))
    assert len(text) == 1  # forced first symbol, then immediate EOS


def test_decode_is_deterministic(rng):
    model = toy_model()
    img = rng.random((32, 32), dtype=np.float32)
    assert greedy_decode(model, img) == greedy_decode(model, img)


def test_decode_respects_length_cap(rng):
    model = toy_model()
    # EOS never wins -> decoding must stop at max_len on its own
    model.store["dec.head.b"].data[model.decoder.eos_id] = -50.0
    text = greedy_decode(model, rng.random((32, 32), dtype=np.float32))
    assert len(text) == model.dec_cfg.max_len


def test_capture_collects_one_entry_per_char(rng):
    model = toy_model()
    capture = []
    text = greedy_decode(model, rng.random((32, 32), dtype=np.float32),
                         capture=capture)
    assert len(capture) == len(text)
    n_final = 9  # cc(2:2) on 17 tokens ends at ceil(17/2)
    for step in capture:
        assert len(step) == model.dec_cfg.blocks
        for probs in step:
            assert probs.shape == (1, model.dec_cfg.heads, 1, n_final)
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)


def test_evaluate_reports_counts(rng):
    model = toy_model()
    images = rng.random((5, 32, 32), dtype=np.float32)
    preds = [greedy_decode(model, images[i]) for i in range(5)]
    labels = [preds[0], preds[1], "zz", "zz", "zz"]
    res = evaluate(model, images, labels)
    assert res["n"] == 5
    assert res["correct"] == 2
    assert res["word_acc"] == pytest.approx(0.4)
    assert res["preds"] == preds


def test_evaluate_accepts_uint8(rng):
    model = toy_model()
    images = (rng.random((2, 32, 32)) * 255).astype(np.uint8)
    res = evaluate(model, images, ["a", "b"])
    float_preds = [greedy_decode(model, images[i].astype(np.float32) / 255.0)
                   for i in range(2)]
    assert res["preds"] == float_preds


# ---------------------------------------------------------------------------
# attention maps


def test_attention_grids_partition_mass(rng):
    model = toy_model()
    maps = attention_grids(model, rng.random((32, 32), dtype=np.float32))
    assert maps.grid_hw == (4, 4)
    assert len(maps.grids) == len(maps.text) >= 1
    for grid, cls_mass in zip(maps.grids, maps.cls_masses):
        assert grid.shape == (4, 4)
        assert (grid >= 0).all()
        # patch mass + CLS mass accounts for everything the decoder attended
        assert grid.sum() + cls_mass == pytest.approx(1.0, abs=1e-5)
        assert 0.0 <= cls_mass <= 1.0


def test_attention_support_limited_to_retained_patches(rng):
    # with first_n reduction the final stage holds patches 0..7 only
    model = toy_model()
    maps = attention_grids(model, rng.random((32, 32), dtype=np.float32))
    flat = np.stack([g.reshape(-1) for g in maps.grids])
    assert (flat[:, 8:] == 0.0).all()
    assert flat[:, :8].sum() > 0


def test_attention_covers_grid_under_pooling(rng):
    # avg pooling keeps every patch inside some window, so support is full
    model = toy_model(selection_scheme="avg_pool_1d")
    maps = attention_grids(model, rng.random((32, 32), dtype=np.float32))
    for grid in maps.grids:
        assert (grid > 0).all()


def test_export_writes_valid_pgms(tmp_path, rng):
    model = toy_model()
    out = str(tmp_path / "attn")
    maps = export_attention(model, rng.random((32, 32), dtype=np.float32), out)

    index = json.loads((tmp_path / "attn" / "attention.json").read_text())
    assert index["text"] == maps.text
    assert index["grid_h"] == 4 and index["grid_w"] == 4
    assert len(index["chars"]) == len(maps.text)

    for i, ent in enumerate(index["chars"]):
        assert ent["file"] == f"char_{i:02d}.pgm"
        img = read_image(os.path.join(out, ent["file"]))
        assert img.shape == (4, 4)
        # peak-normalized output: the brightest cell is (close to) 1
        assert img.max() == pytest.approx(1.0, abs=1 / 255)
        rebuilt = img * ent["scale"]
        np.testing.assert_allclose(rebuilt, maps.grids[i], atol=ent["scale"] / 255)
    assert maps.text == index["text"]


def test_export_scale_recovers_raw_mass(tmp_path, rng):
    model = toy_model()
    out = str(tmp_path / "attn")
    maps = export_attention(model, rng.random((32, 32), dtype=np.float32), out)
    index = json.loads((tmp_path / "attn" / "attention.json").read_text())
    for ent, grid in zip(index["chars"], maps.grids):
        assert ent["scale"] == pytest.approx(float(grid.max()))
        assert ent["cls_mass"] == pytest.approx(
            1.0 - grid.sum(), abs=1e-5)
