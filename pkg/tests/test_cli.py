import csv
import json

import numpy as np
import pytest

from stillflow import __version__
from stillflow.cli import main
from stillflow.signal import read_wav

TINY = {
    "data": {"scenes_per_split": [2, 1, 1], "mixtures_per_scene": 2, "mixture_s": 1.0},
    "udit": {"layers": 2, "embed_dim": 32, "heads": 2, "freq_embed_dim": 16},
    "train": {"batch_size": 4, "vae_batch_size": 2, "vae_steps": 4, "flow_steps": 20, "adapt_steps": 4,
              "checkpoint_every": 5},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    common = ["--preset", "desk", "--config", cfg, "--seed", 3]
    assert run("make-toy-assets", "--out", root / "assets", "--scenes", 4, "--speakers", 8, *common) == 0
    assert run("gen-data", "--inventory", root / "assets" / "inventory.json", "--out", root / "data", *common) == 0
    assert run("train-vae", "--data", root / "data", "--out", root / "vae", *common) == 0
    assert run("train-flow", "--data", root / "data", "--compressor", root / "vae" / "compressor.ckpt",
               "--out", root / "flow", *common) == 0
    return root, common


def curve(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_missing_inventory_exits_2(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "inventory.json"
    assert run("gen-data", "--inventory", missing, "--out", tmp_path / "d") == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: ") and str(missing) in err and "\n" not in err


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"flow": {"stepz": 1}}))
    assert run("make-toy-assets", "--out", tmp_path / "a", "--config", bad) == 2


def test_enhance_default_steps():
    from stillflow.cli import build_parser

    args = build_parser().parse_args(["enhance", "--model", "m", "--in", "i", "--out", "o"])
    assert args.steps == 50


def test_eval_clean_against_clean(pipeline, capsys):
    root, common = pipeline
    clean = root / "data" / "test"
    assert run("eval", "--clean", clean, "--est", clean, "--clean-suffix", ".clean.wav",
               "--est-suffix", ".clean.wav", "--report", root / "ev" / "self", *common) == 0
    rows = list(csv.reader(open(root / "ev" / "self.csv")))[1:]
    lsd = [float(v) for _, m, v in rows if m == "lsd"]
    assert lsd and all(v == 0.0 for v in lsd)
    run_cfg = json.loads((root / "ev" / "run_config.json").read_text())
    assert run_cfg["version"] == __version__


def test_flow_curve_and_resume(pipeline):
    root, common = pipeline
    straight = curve(root / "flow" / "udit_curve.csv")
    assert len(straight) == 20
    args = ["train-flow", "--data", root / "data", "--compressor", root / "vae" / "compressor.ckpt", *common]
    assert run(*args, "--out", root / "resumed", "--steps", 10) == 0
    assert len(curve(root / "resumed" / "udit_curve.csv")) == 10
    assert run(*args, "--out", root / "resumed", "--steps", 20) == 0
    resumed = curve(root / "resumed" / "udit_curve.csv")
    assert len(resumed) == 20
    assert float(resumed[-1]["loss"]) == pytest.approx(float(straight[-1]["loss"]), rel=1e-6)


def test_enhance_writes_outputs(pipeline):
    root, common = pipeline
    assert run("enhance", "--model", root / "flow" / "udit.ckpt", "--in", root / "data" / "test",
               "--suffix", ".mix.wav", "--out", root / "enh", "--steps", 4, *common) == 0
    outs = sorted((root / "enh").rglob("*.mix.wav"))
    assert outs
    y, rate = read_wav(outs[0])
    assert rate == 8000 and np.isfinite(y).all()
    report = json.loads((root / "enh" / "enhance_report.json").read_text())
    assert report["steps"] == 4 and report["files"] == len(outs)


def adapt_fraction(out, capsys):
    text = capsys.readouterr().out
    line = next(ln for ln in text.splitlines() if ln.startswith("trainable parameters"))
    assert "frozen tensors changed: 0" in text
    return float(line.split()[-1].rstrip("%"))


def test_adapt_modes(pipeline, capsys):
    root, common = pipeline
    base = ["adapt", "--backbone", root / "flow" / "udit.ckpt", "--data", root / "data", *common]
    capsys.readouterr()
    assert run(*base, "--mode", "lora", "--out", root / "lora") == 0
    lora = adapt_fraction(root / "lora", capsys)
    assert run(*base, "--mode", "moelora", "--out", root / "moe") == 0
    moe = adapt_fraction(root / "moe", capsys)
    assert 0 < lora < moe
    assert run(*base, "--extend", "--adapters", root / "moe" / "adapters.ckpt", "--out", root / "ext") == 0
    adapt_fraction(root / "ext", capsys)
    assert run(*base, "--extend", "--out", root / "bad") == 2
