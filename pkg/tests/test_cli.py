import json

import pytest

from utt.checkpoint import checkpoint_hash
from utt.cli import main

TINY_YAML = """
tracker: {backbone_widths: [4, 4, 8], dim: 8, heads: 2, ffn_hidden: 16, pool_size: 3, iterations: 1}
train: {iterations: 2, sot_batch: 2, mot_batch: 2, checkpoint_every: 0}
data:
  sot_train: {count: 2, scene: {canvas: [64, 64], num_frames: [4, 6], size: [12, 20]}}
  sot_eval: {count: 1, scene: {canvas: [64, 64], num_frames: [4, 6], size: [12, 20]}}
  mot_train: {count: 2, scene: {canvas: [64, 64], num_frames: [4, 6], size: [12, 20]}}
  mot_eval: {count: 2, scene: {canvas: [64, 64], num_frames: [4, 6], size: [12, 20]}}
bench: {sizes: [4, 8], targets: [1], dim: 8, pool_size: 3, repeats: 1}
"""


@pytest.fixture
def cfg(tmp_path, monkeypatch):
    monkeypatch.setenv("UTT_OUT_ROOT", str(tmp_path / "runs"))
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_YAML)
    return path


def test_identity_results_evaluate_perfectly(cfg, tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["generate", "--config", str(cfg), "--split", "mot_eval", "--out", str(data)]) == 0
    res = tmp_path / "res"
    res.mkdir()
    for name in json.loads((data / "manifest.json").read_text())["sequences"]:
        (res / f"{name}.txt").write_text((data / name / "gt.txt").read_text())
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(cfg), "--task", "mot", "--results", str(res), "--data", str(data),
                 "--out", str(out)]) == 0
    report = json.loads((out / "mot_report.json").read_text())["pooled"]
    assert report["mota"] == 1.0 and report["idsw"] == 0 and report["idf1"] == 1.0
    assert (out / "config.yaml").exists() and (out / "run.json").exists()


def test_same_seed_same_checkpoint(cfg, tmp_path):
    hashes = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
        hashes.append(checkpoint_hash(out / "checkpoints" / "final"))
    assert hashes[0] == hashes[1]
    out = tmp_path / "c"
    assert main(["train", "--config", str(cfg), "--seed", "4", "--out", str(out)]) == 0
    assert checkpoint_hash(out / "checkpoints" / "final") != hashes[0]


def test_train_track_eval_render_chain(cfg, tmp_path):
    runs = tmp_path / "runs"
    assert main(["train", "--config", str(cfg), "--mode", "unified"]) == 0
    assert (runs / "train" / "checkpoints" / "final" / "manifest.json").exists()
    assert main(["track-sot", "--config", str(cfg)]) == 0
    assert main(["track-mot", "--config", str(cfg)]) == 0
    assert main(["eval", "--config", str(cfg), "--task", "sot", "--results", str(runs / "track-sot" / "results")]) == 0
    assert main(["eval", "--config", str(cfg), "--task", "mot"]) == 0
    assert main(["render", "--config", str(cfg), "--task", "mot", "--results", str(runs / "track-mot" / "results")]) == 0
    assert any((runs / "render").rglob("*.png"))


def test_bench_command(cfg, tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "complexity.json").read_text())
    assert len(report["rows"]) == 2


def test_errors_leave_artifact_and_exit_code(cfg, tmp_path, capsys):
    out = tmp_path / "bad"
    assert main(["track-sot", "--config", str(cfg), "--checkpoint", str(tmp_path / "nowhere"), "--out", str(out)]) == 1
    err = json.loads((out / "error.json").read_text())
    assert err["type"] == "CheckpointError" and "nowhere" in err["message"]
    assert main(["train", "--config", str(cfg), "--set", "K=0", "--out", str(out)]) == 1
    assert "pool_size" in json.loads((out / "error.json").read_text())["message"]
    assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
    assert not (out / "error.json").exists()
