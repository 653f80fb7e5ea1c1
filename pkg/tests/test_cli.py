import csv

import numpy as np
import pytest

from uncflow import flowio
from uncflow.cli import main
from uncflow.fusion import FusionNet
from uncflow.model import FlowNet, ModelConfig

TINY_INI = """
[train]
steps = 2
batch_size = 2
log_every = 0
aug_start = 0.5
hg_start = 0.5

[model]
feature_dim = 8
hidden_dim = 8
context_dim = 8
head_dim = 8
unc_dim = 4
motion_dim = 8
encoder_width = 8
iterations = 2

[data]
train_size = 4
val_size = 2

[synth]
height = 32
width = 32
bg_translation = 3
obj_translation = 3
obj_radius_min = 4
obj_radius_max = 8
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.ini").write_text(TINY_INI)
    assert main(["train", "--config", str(d / "tiny.ini"), "--out", str(d / "run")]) == 0
    assert main(["synth", "--seed", "7", "--count", "2", "--triple", "--config", str(d / "tiny.ini"),
                 "--out", str(d / "triples")]) == 0
    return d


def test_train_outputs(workdir):
    run = workdir / "run"
    for name in ("final.ckpt", "runlog.json", "config.ini", "val_report.csv"):
        assert (run / name).exists()
    FlowNet.load(run / "final.ckpt")


def test_eval_writes_report(workdir, capsys):
    rep = workdir / "eval.csv"
    assert main(["eval", "--ckpt", str(workdir / "run" / "final.ckpt"), "--data", str(workdir / "triples"),
                 "--report", str(rep)]) == 0
    rows = list(csv.DictReader(rep.open()))
    assert len(rows) >= 2
    assert "EPE" in capsys.readouterr().out


def test_fusion_commands(workdir, capsys):
    fck = workdir / "fusion.ckpt"
    assert main(["fuse-train", "--ckpt", str(workdir / "run" / "final.ckpt"), "--data", str(workdir / "triples"),
                 "--out", str(fck), "--steps", "2"]) == 0
    rep = workdir / "fusion.csv"
    assert main(["fuse-eval", "--ckpt", str(workdir / "run" / "final.ckpt"), "--fusion-ckpt", str(fck),
                 "--data", str(workdir / "triples"), "--theta", "35", "--report", str(rep)]) == 0
    assert [r["variant"] for r in csv.DictReader(rep.open())] == ["none", "uncertainty", "occlusion"]


def test_viz_and_sparsify(tmp_path):
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(12, 10, 2)).astype(np.float32)
    pred = gt + rng.normal(scale=0.3, size=gt.shape).astype(np.float32)
    flowio.save_flo(tmp_path / "gt.flo", gt)
    flowio.save_flo(tmp_path / "pred.flo", pred)
    err = np.linalg.norm(pred - gt, axis=-1).astype(np.float32)
    (tmp_path / "unc.raw").write_bytes(flowio.write_raster(err))
    assert main(["viz", "--flow", str(tmp_path / "gt.flo"), "--out", str(tmp_path / "gt.png")]) == 0
    assert flowio.read_image(tmp_path / "gt.png").shape == (12, 10, 3)
    assert main(["sparsify", "--pred", str(tmp_path / "pred.flo"), "--unc", str(tmp_path / "unc.raw"),
                 "--gt", str(tmp_path / "gt.flo"), "--plot", str(tmp_path / "curve.png"),
                 "--data", str(tmp_path / "curve.csv")]) == 0
    assert (tmp_path / "curve.png").stat().st_size > 0 and (tmp_path / "curve.csv").exists()


def test_errors_exit_with_code_2(tmp_path, capsys):
    (tmp_path / "bad.flo").write_bytes(b"garbage")
    assert main(["viz", "--flow", str(tmp_path / "bad.flo"), "--out", str(tmp_path / "x.png")]) == 2
    (tmp_path / "bad.ini").write_text("[nosuch]\n")
    assert main(["train", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path),
                 "--report", str(tmp_path / "r.csv")]) == 2
    assert "error:" in capsys.readouterr().err


def test_fuse_quantile_theta_is_stored_and_reused(workdir, capsys):
    fck = workdir / "fusion_q.ckpt"
    assert main(["fuse-train", "--ckpt", str(workdir / "run" / "final.ckpt"), "--data", str(workdir / "triples"),
                 "--out", str(fck), "--steps", "1", "--theta=-0.5"]) == 0
    out = capsys.readouterr().out
    theta = float(out.split("theta ")[1].split()[0])
    assert theta > 0
    assert FusionNet.load(fck).meta["theta"] == pytest.approx(theta)
    assert main(["fuse-eval", "--ckpt", str(workdir / "run" / "final.ckpt"), "--fusion-ckpt", str(fck),
                 "--data", str(workdir / "triples")]) == 0
