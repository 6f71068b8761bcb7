import json
import re

import numpy as np
import pytest

from castr import cli, flops
from castr.data import Charset, render_sample, sample_rng, write_pgm

HEX = "0123456789ABCDEF"

MODEL_FLAGS = [
    "--encoder-spec", "e-cc(2:2)-32,4,4", "--decoder-blocks", "1",
    "--decoder-dim", "32", "--decoder-heads", "4", "--patch", "8",
    "--image-h", "32", "--image-w", "32", "--charset", HEX,
    "--max-len", "4",
]


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ---------------------------------------------------------------------------
# exit codes


def test_no_command_prints_usage_and_fails(capsys):
    code, out, err = run(capsys)
    assert code == 1
    assert "usage:" in err


def test_help_exits_zero(capsys):
    code, out, err = run(capsys, "--help")
    assert code == 0
    assert "gen-data" in out


def test_unknown_flag_is_usage_error(capsys):
    code, out, err = run(capsys, "flops", "--spec", "e-base", "--bogus")
    assert code == 1


def test_missing_required_flag_is_usage_error(capsys):
    code, out, err = run(capsys, "gen-data", "--count", "3")
    assert code == 1


def test_runtime_errors_exit_two(capsys, tmp_path):
    code, out, err = run(capsys, "eval", "--checkpoint",
                         str(tmp_path / "nope.ckpt"), "--manifest",
                         str(tmp_path / "nope.tsv"))
    assert code == 2
    assert "error:" in err

    code, out, err = run(capsys, "flops", "--spec", "e-cc(5:5)-base")
    assert code == 2
    assert "blocks sum" in err

    code, out, err = run(capsys, "flops", "--spec", "e-base", "--decoder", "d9")
    assert code == 2

    code, out, err = run(capsys, "gen-data", "--out", str(tmp_path / "d"),
                         "--count", "2", "--charset", "AA")
    assert code == 2
    assert "duplicate" in err


# ---------------------------------------------------------------------------
# flops reporting


def test_flops_table_matches_report(capsys):
    code, out, err = run(capsys, "flops", "--spec", "e-base+d1")
    assert code == 0
    rep = flops.report("e-base+d1", patch=16)
    for word in ("encoder", "decoder", "total"):
        assert word in out
    assert f"{rep.gflops_encoder:.2f}" in out
    assert f"{rep.gflops_decoder:.2f}" in out


def test_flops_json_output(capsys):
    code, out, err = run(capsys, "flops", "--spec", "e-cc(6:6)-small+d1",
                         "--patch", "16", "--json")
    assert code == 0
    payload = json.loads(out)
    rep = flops.report("e-cc(6:6)-small+d1", patch=16)
    assert payload["params_encoder"] == rep.params_encoder
    assert payload["gflops_total"] == pytest.approx(rep.gflops_total)
    assert payload["gflops_total"] == pytest.approx(
        payload["gflops_encoder"] + payload["gflops_decoder"])
    assert "convention" in payload


def test_flops_passes_flag_scales_decoder(capsys):
    _, out1, _ = run(capsys, "flops", "--spec", "e-base+d1", "--json")
    _, out8, _ = run(capsys, "flops", "--spec", "e-base+d1", "--passes", "8",
                     "--json")
    a, b = json.loads(out1), json.loads(out8)
    assert b["gflops_decoder"] == pytest.approx(2 * a["gflops_decoder"])
    assert b["gflops_encoder"] == a["gflops_encoder"]


# ---------------------------------------------------------------------------
# end-to-end pipeline


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = cli.main(["gen-data", "--out", str(out), "--count", "12",
                     "--seed", "5", "--min-len", "1", "--max-len", "2",
                     "--canvas", "32", "--charset", HEX])
    assert code == 0
    return out


def test_gen_data_writes_manifest_and_run_manifest(corpus, capsys):
    manifest = json.loads((corpus / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["count"] == 12
    assert "--seed" in manifest["argv"]
    lines = (corpus / "manifest.tsv").read_text().splitlines()
    assert len(lines) == 12


def test_pipeline_train_eval_infer_attn(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, err = run(
        capsys, "train", *MODEL_FLAGS,
        "--manifest", str(corpus / "manifest.tsv"), "--out", str(out),
        "--steps", "3", "--batch-size", "4", "--perms", "1",
        "--log-every", "1", "--seed", "7")
    assert code == 0, err
    ckpt = stdout.strip()
    assert ckpt.endswith("checkpoint_final.ckpt")

    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["model"]["encoder_spec"] == "e-cc(2:2)-32,4,4"
    assert manifest["seed"] == 7
    assert manifest["train"]["steps"] == 3

    rows = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2, 3]

    code, stdout, err = run(capsys, "eval", "--checkpoint", ckpt,
                            "--manifest", str(corpus / "manifest.tsv"))
    assert code == 0, err
    res = json.loads(stdout)
    assert res["n"] == 12
    assert 0.0 <= res["word_acc"] <= 1.0

    image = str(corpus / "s000000.pgm")
    code, stdout, err = run(capsys, "infer", "--checkpoint", ckpt,
                            "--image", image)
    assert code == 0, err
    text = stdout.strip()
    assert 1 <= len(text) <= 4 and all(c in HEX for c in text)

    code, stdout, err = run(capsys, "infer", "--checkpoint", ckpt,
                            "--image", image, "--json")
    assert json.loads(stdout) == {"text": text}

    attn_dir = tmp_path / "attn"
    code, stdout, err = run(capsys, "attn", "--checkpoint", ckpt,
                            "--image", image, "--out", str(attn_dir))
    assert code == 0, err
    payload = json.loads(stdout)
    assert payload["text"] == text
    index = json.loads((attn_dir / "attention.json").read_text())
    assert len(index["chars"]) == len(text)
    for ent in index["chars"]:
        assert (attn_dir / ent["file"]).exists()


def test_infer_resizes_foreign_geometry(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, err = run(
        capsys, "train", *MODEL_FLAGS,
        "--manifest", str(corpus / "manifest.tsv"), "--out", str(out),
        "--steps", "1", "--batch-size", "4", "--perms", "1", "--seed", "0")
    assert code == 0, err
    ckpt = stdout.strip()

    rec = render_sample(sample_rng(0, 0), Charset(HEX), (1, 2), canvas=64)
    big = tmp_path / "big.pgm"
    write_pgm(str(big), rec.image)
    code, stdout, err = run(capsys, "infer", "--checkpoint", ckpt,
                            "--image", str(big))
    assert code == 0, err
    assert len(stdout.strip()) >= 1


def test_train_same_seed_gives_identical_logs(corpus, tmp_path, capsys):
    logs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        code, stdout, err = run(
            capsys, "train", *MODEL_FLAGS,
            "--manifest", str(corpus / "manifest.tsv"), "--out", str(out),
            "--steps", "3", "--batch-size", "4", "--perms", "2",
            "--log-every", "1", "--seed", "11")
        assert code == 0, err
        logs.append((out / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_flags_override_config_file(corpus, tmp_path, capsys):
    cfg = tmp_path / "settings.json"
    cfg.write_text(json.dumps({
        "encoder_spec": "e-32,4,4", "decoder_blocks": 1, "decoder_dim": 32,
        "decoder_heads": 4, "patch": 8, "image_h": 32, "image_w": 32,
        "charset": HEX, "max_len": 4, "seed": 3,
    }))
    out = tmp_path / "run"
    code, stdout, err = run(
        capsys, "train", "--config", str(cfg),
        "--encoder-spec", "e-cc(2:2)-32,4,4",
        "--manifest", str(corpus / "manifest.tsv"), "--out", str(out),
        "--steps", "1", "--batch-size", "4", "--perms", "1")
    assert code == 0, err
    manifest = json.loads((out / "run_manifest.json").read_text())
    # the flag wins, everything else comes from the file
    assert manifest["model"]["encoder_spec"] == "e-cc(2:2)-32,4,4"
    assert manifest["model"]["seed"] == 3
    assert manifest["seed"] == 3
