import csv
import json

import numpy as np
import pytest

from rdft import audio
from rdft.cli import run_command

TINY = """\
seed: 1
output_dir: {out}
dataset:
  synthetic: {{num_classes: 6, per_class: 6, amplitude: 0.3}}
split: {{fractions: [0.5, 0.0, 0.5]}}
meta: {{C: 2, K: 2, Q: 2, n: 1, meta_batch: 1, order: first}}
episodes: {{train: 3, eval: 4}}
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY.format(out=tmp_path / "run"))
    return path, tmp_path / "run"


def _run(*argv):
    return run_command([str(a) for a in argv])


def test_usage_errors_exit_2(tiny, capsys):
    assert _run("bogus") == 2
    assert _run("train") == 2  # missing --config
    assert _run("eval", "--config", tiny[0], "--with-finetune", "--no-finetune") == 2


def test_runtime_errors_exit_1(tmp_path, tiny, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("meta: {alpha: -1}\n")
    assert _run("train", "--config", bad) == 1
    assert "config error" in capsys.readouterr().err
    assert _run("eval", "--config", tiny[0], "--checkpoint", tmp_path / "none.ckpt") == 1


def test_synth_writes_cache(tiny):
    cfg, out = tiny
    assert _run("synth", "--config", cfg) == 0
    assert (out / "features.bin").exists()


def test_train_eval_sweep(tiny):
    cfg, out = tiny
    assert _run("train", "--config", cfg, "--algorithm", "maml_proto") == 0
    assert (out / "model.ckpt").exists()
    log = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 3

    assert _run("eval", "--config", cfg, "--no-finetune") == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert rows[0]["model"] == "maml_proto" and rows[0]["acc_w_finetune"] == ""
    assert int(rows[0]["episodes"]) == 4

    assert _run("eval", "--config", cfg) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert rows[0]["acc_w_finetune"] != ""
    recs = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    eps = [r for r in recs if r["record"] == "episode"]
    assert len(eps) == 4 and all(r["acc_after"] is not None for r in eps)
    assert (out / "eval_config.yaml").exists()

    assert _run("sweep", "--config", cfg, "--alphas", "0.001,0.01,0.1,0.2",
                "--steps", "1,2,4", "--episodes", "2") == 0
    grid = list(csv.DictReader(open(out / "sweep.csv")))
    assert len(grid) == 12


def test_train_is_deterministic(tiny, tmp_path):
    cfg, _ = tiny
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert _run("train", "--config", cfg, "--algorithm", "mc_proto", "--seed", 3,
                    "--output-dir", out) == 0
        blobs.append((out / "model.ckpt").read_bytes())
    assert blobs[0] == blobs[1]


def test_protonet_baseline_trains(tiny):
    cfg, out = tiny
    assert _run("train", "--config", cfg, "--algorithm", "protonet", "--updates", 4) == 0
    assert _run("eval", "--config", cfg) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert rows[0]["model"] == "protonet"


def test_reproducibility_block_reproduces_metrics(tiny):
    cfg, out = tiny
    assert _run("train", "--config", cfg) == 0
    assert _run("eval", "--config", cfg) == 0
    first = (out / "metrics.jsonl").read_text()
    block = out / "eval_config.yaml"
    replay = out.parent / "replay.yaml"
    replay.write_text(block.read_text())
    assert _run("eval", "--config", replay, "--checkpoint", out / "model.ckpt") == 0
    assert (out / "metrics.jsonl").read_text() == first


def test_features_from_manifest(tmp_path):
    sr = 8000
    rows = ["path,class_label"]
    for c, f in enumerate((300.0, 1200.0)):
        for i in range(2):
            t = np.arange(sr // 2) / sr
            name = f"c{c}_{i}.wav"
            (tmp_path / name).write_bytes(audio.write_wav(0.4 * np.sin(2 * np.pi * f * t), sr))
            rows.append(f"{name},class{c}")
    (tmp_path / "manifest.csv").write_text("\n".join(rows) + "\n")
    cfgp = tmp_path / "f.yaml"
    cfgp.write_text("dataset: {manifest: manifest.csv}\n"
                    "mel: {profile: custom, sample_rate: 8000, n_fft: 256, hop: 128, "
                    "n_mels: 16, target_frames: 16}\n"
                    f"output_dir: {tmp_path / 'run'}\n")
    assert _run("features", "--config", cfgp) == 0
    cfg_mel = audio.MelConfig(8000, 256, 128, 16, 0.0, None, 16)
    ds = audio.load_feature_cache(tmp_path / "run" / "features.bin")
    assert ds is not None and len(ds) == 4 and ds.feature_shape == (1, 16, 16)
    assert cfg_mel.n_mels == 16
