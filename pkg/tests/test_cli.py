import json
import subprocess
import sys

import numpy as np
import pytest

from splatstego import assets
from splatstego.cli import build_parser, main
from splatstego.evaluate import psnr
from splatstego.nn import make_stack
from splatstego.train import TrainConfig

FAST = ["--iterations", "8", "--decoder_width", "8", "--decoder_depth", "3", "--log_interval", "0"]


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert main(["synth", "--views", "8", "--size", "16", "--hidden", "2", "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def hider(toy):
    out = toy / "hider"
    assert main(["fit", "--manifest", str(toy / "data/transforms.json"), "--out", str(out), *FAST]) == 0
    return out


@pytest.fixture(scope="module")
def multi(toy):
    out = toy / "multi"
    rc = main(["fit", "--manifest", str(toy / "data/transforms.json"), "--out", str(out),
               "--mode", "hider-multi", "--L", "2", *FAST])
    assert rc == 0
    return out


def test_help_lists_flags_and_exits_zero():
    r = subprocess.run([sys.executable, "-m", "splatstego", "fit", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    import dataclasses

    for f in dataclasses.fields(TrainConfig):
        assert f"--{f.name}" in r.stdout
    top = subprocess.run([sys.executable, "-m", "splatstego", "--help"], capture_output=True, text=True)
    assert top.returncode == 0
    for cmd in ("fit", "render", "extract", "prune", "metrics", "detect", "rtws", "synth"):
        assert cmd in top.stdout


def test_unknown_flag_exits_one(capsys):
    with pytest.raises(SystemExit) as info:
        main(["fit", "--no-such-flag"])
    assert info.value.code == 1


def test_config_errors_exit_one(toy, tmp_path):
    manifest = str(toy / "data/transforms.json")
    assert main(["fit", "--manifest", manifest, "--out", str(tmp_path), "--lam", "-1"]) == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lambda": 0.5}))
    assert main(["fit", "--config", str(cfg), "--manifest", manifest, "--out", str(tmp_path)]) == 1
    assert main(["fit", "--out", str(tmp_path)]) == 1
    assert main(["fit", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1


def test_config_file_with_flag_override(toy, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"manifest": str(toy / "data/transforms.json"), "out": str(tmp_path / "o"),
                               "mode": "baseline-3dgs", "iterations": 50, "log_interval": 0}))
    assert main(["fit", "--config", str(cfg), "--iterations", "3"]) == 0
    summary = json.loads((tmp_path / "o/summary.json").read_text())
    assert summary["iterations"] == 3 and summary["mode"] == "baseline-3dgs"


def test_fit_artifacts(hider):
    for name in ("cloud.ply", "scene_decoder.bin", "message_decoder.bin", "metrics.csv", "summary.json"):
        assert (hider / name).exists(), name
    assert assets.read_ply(hider / "cloud.ply").feature_dim == 16
    header = (hider / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("iteration,l_rgb,l_mes,psnr_s,psnr_m")


def test_baseline_3dgs_single_view_then_render(tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--kind", "plain", "--views", "1", "--size", "16", "--out", str(data)]) == 0
    out = tmp_path / "fit"
    assert main(["fit", "--manifest", str(data / "transforms.json"), "--out", str(out),
                 "--mode", "baseline-3dgs", "--iterations", "5", "--log_interval", "0"]) == 0
    assert not (out / "scene_decoder.bin").exists()
    assert main(["render", "--ply", str(out / "cloud.ply"), "--manifest", str(data / "transforms.json"),
                 "--out", str(tmp_path / "r")]) == 0
    assert assets.load_image(tmp_path / "r/view_000.png").shape == (16, 16, 3)


def test_multi_writes_six_channel_decoder_and_splits(toy, multi, tmp_path):
    assert assets.read_checkpoint(multi / "message_decoder.bin").out_channels == 6
    assert main(["extract", "--ply", str(multi / "cloud.ply"), "--message-decoder",
                 str(multi / "message_decoder.bin"), "--manifest", str(toy / "data/transforms.json"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "hidden_000_0.png").exists() and (tmp_path / "hidden_000_1.png").exists()


def test_render_extract_match_metrics(toy, hider, tmp_path):
    manifest = str(toy / "data/transforms.json")
    assert main(["render", "--ply", str(hider / "cloud.ply"), "--scene-decoder", str(hider / "scene_decoder.bin"),
                 "--manifest", manifest, "--out", str(tmp_path / "r")]) == 0
    assert main(["extract", "--ply", str(hider / "cloud.ply"), "--message-decoder",
                 str(hider / "message_decoder.bin"), "--manifest", manifest, "--out", str(tmp_path / "x")]) == 0
    assert main(["metrics", "--ply", str(hider / "cloud.ply"), "--scene-decoder", str(hider / "scene_decoder.bin"),
                 "--message-decoder", str(hider / "message_decoder.bin"), "--manifest", manifest,
                 "--views", "all", "--out", str(tmp_path / "m")]) == 0
    import csv

    rows = list(csv.DictReader(open(tmp_path / "m/metrics.csv")))
    m = assets.read_manifest(manifest)
    for row in rows:
        v = int(row["view"])
        got_s = psnr(assets.load_image(tmp_path / f"r/view_{v:03d}.png"), m["images"][v])
        got_m = psnr(assets.load_image(tmp_path / f"x/hidden_{v:03d}.png"), m["hidden"][v][0])
        # PNG quantisation is the only difference
        assert abs(got_s - float(row["psnr_s"])) < 0.3
        assert abs(got_m - float(row["psnr_m"])) < 0.3


def test_extract_with_random_decoder_is_worse(toy, hider, tmp_path):
    manifest = str(toy / "data/transforms.json")
    assets.write_checkpoint(make_stack(16, 3, depth=3, width=8, seed=99), tmp_path / "rand.bin")
    main(["extract", "--ply", str(hider / "cloud.ply"), "--message-decoder", str(hider / "message_decoder.bin"),
          "--manifest", manifest, "--out", str(tmp_path / "a")])
    main(["extract", "--ply", str(hider / "cloud.ply"), "--message-decoder", str(tmp_path / "rand.bin"),
          "--manifest", manifest, "--out", str(tmp_path / "b")])
    m = assets.read_manifest(manifest)
    good = np.mean([psnr(assets.load_image(tmp_path / f"a/hidden_{v:03d}.png"), m["hidden"][v][0]) for v in range(8)])
    bad = np.mean([psnr(assets.load_image(tmp_path / f"b/hidden_{v:03d}.png"), m["hidden"][v][0]) for v in range(8)])
    assert bad < good


def test_channel_mismatch_exits_three(toy, hider, tmp_path):
    assets.write_checkpoint(make_stack(8, 3, depth=2, width=4), tmp_path / "d8.bin")
    rc = main(["render", "--ply", str(hider / "cloud.ply"), "--scene-decoder", str(tmp_path / "d8.bin"),
               "--manifest", str(toy / "data/transforms.json"), "--out", str(tmp_path / "r")])
    assert rc == 3


def test_render_needs_only_public_decoder(toy, hider, tmp_path):
    rc = main(["render", "--ply", str(hider / "cloud.ply"), "--scene-decoder", str(hider / "scene_decoder.bin"),
               "--manifest", str(toy / "data/transforms.json"), "--out", str(tmp_path)])
    assert rc == 0 and len(list(tmp_path.glob("view_*.png"))) == 8


def test_prune_ratio_zero_is_byte_identity(hider, tmp_path):
    for method in ("sequential", "random"):
        assert main(["prune", "--ply", str(hider / "cloud.ply"), "--method", method, "--ratio", "0",
                     "--out", str(tmp_path / method)]) == 0
        assert (tmp_path / method / "cloud.ply").read_bytes() == (hider / "cloud.ply").read_bytes()


def test_prune_removes_gaussians(hider, tmp_path):
    n = len(assets.read_ply(hider / "cloud.ply"))
    assert main(["prune", "--ply", str(hider / "cloud.ply"), "--ratio", "0.25", "--out", str(tmp_path)]) == 0
    assert len(assets.read_ply(tmp_path / "cloud.ply")) == n - int(np.floor(0.25 * n))
    assert main(["prune", "--ply", str(hider / "cloud.ply"), "--ratio", "1.5", "--out", str(tmp_path)]) == 1


def test_detect_identical_sets_is_half(toy, tmp_path):
    imgs = str(toy / "data/images")
    assert main(["detect", "--positives", imgs, "--negatives", imgs, "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["auc"] == 0.5
    assert (tmp_path / "roc.csv").read_text().startswith("threshold,fpr,tpr")


def test_detect_from_model(toy, hider, tmp_path):
    assert main(["detect", "--ply", str(hider / "cloud.ply"), "--scene-decoder", str(hider / "scene_decoder.bin"),
                 "--manifest", str(toy / "data/transforms.json"), "--out", str(tmp_path)]) == 0
    auc = json.loads((tmp_path / "summary.json").read_text())["auc"]
    assert 0.0 <= auc <= 1.0


def test_rtws_zero_iterations_keeps_cloud(toy, hider, tmp_path):
    rc = main(["rtws", "--ply", str(hider / "cloud.ply"), "--scene-decoder", str(hider / "scene_decoder.bin"),
               "--manifest", str(toy / "data/transforms.json"), "--watermark", str(toy / "data/watermark.png"),
               "--out", str(tmp_path), "--iterations", "0", "--rtws_pretrain_iterations", "2",
               "--rtws_watermark_width", "4", "--decoder_depth", "2"])
    assert rc == 0
    assert (tmp_path / "cloud.ply").read_bytes() == (hider / "cloud.ply").read_bytes()
    assert (tmp_path / "watermark_decoder.bin").exists() and (tmp_path / "watermark_encoder.bin").exists()


def test_commands_are_idempotent(toy, tmp_path):
    manifest = str(toy / "data/transforms.json")
    outs = []
    for k in range(2):
        out = tmp_path / str(k)
        assert main(["--threads", str(1 + 3 * k), "fit", "--manifest", manifest, "--out", str(out), *FAST]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    assert {"cloud.ply", "metrics.csv", "summary.json", "timings.json"} <= set(names)
    for name in names:
        if name != "timings.json":
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_abort_exits_two(toy, tmp_path):
    rc = main(["fit", "--manifest", str(toy / "data/transforms.json"), "--out", str(tmp_path),
               "--mode", "baseline-3dgs", "--lr_feature", "1e300", "--iterations", "5", "--log_interval", "0"])
    assert rc == 2


def test_parser_documents_defaults():
    text = build_parser()._subparsers._group_actions[0].choices["fit"].format_help()
    assert "(default 0.5)" in text and "(default 16)" in text
