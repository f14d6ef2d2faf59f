"""Command-line entry point: ``splatstego <command> ...``.

Exit codes: 0 success, 1 configuration or input error, 2 training abort,
3 decoder/cloud channel mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import assets, evaluate, synthetic
from .errors import (
    CheckpointError,
    ImageFormatError,
    InvalidParameterError,
    ManifestError,
    PlyError,
    ShapeMismatchError,
    TrainingAbort,
)
from .rasterizer import set_num_threads
from .train import MODES, Model, PairedDataset, TrainConfig, fit, predict_view, rtws_finetune

EXIT_CONFIG = 1
EXIT_ABORT = 2
EXIT_CHANNELS = 3

CLOUD_FILE = "cloud.ply"
SCENE_DECODER_FILE = "scene_decoder.bin"
MESSAGE_DECODER_FILE = "message_decoder.bin"
METRICS_FILE = "metrics.csv"
ROC_FILE = "roc.csv"
SUMMARY_FILE = "summary.json"
# the one artifact that is not byte-reproducible
TIMINGS_FILE = "timings.json"
WATERMARK_ENCODER_FILE = "watermark_encoder.bin"
WATERMARK_DECODER_FILE = "watermark_decoder.bin"

PATH_KEYS = ("manifest", "out")


class UsageError(Exception):
    pass


class ChannelMismatch(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with exit code 1 on usage errors (argparse defaults to 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_train_flags(p):
    for f in dataclasses.fields(TrainConfig):
        if f.name == "threads":
            continue
        default = f.default
        kind = type(default)
        kind = _bool if kind is bool else kind
        kw = dict(dest=f.name, type=kind, default=None,
                  help=f"(default {default!r})")
        if f.name == "mode":
            kw["choices"] = MODES
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append("--" + f.name.replace("_", "-"))
        p.add_argument(*flags, **kw)


def build_parser():
    p = Parser(prog="splatstego", description="Hide scenes and images inside Gaussian splat clouds.")
    p.add_argument("--threads", dest="global_threads", type=int, default=None,
                   help="worker threads inside render passes (default 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    f = sub.add_parser("fit", help="train a cloud and its decoders from a manifest")
    f.add_argument("--config", help="JSON file with training fields plus manifest/out paths")
    f.add_argument("--manifest", help="transforms manifest (overrides config)")
    f.add_argument("--out", help="output directory (overrides config)")
    _add_train_flags(f)

    r = sub.add_parser("render", help="render the public scene (cloud + scene decoder)")
    r.add_argument("--ply", required=True)
    r.add_argument("--scene-decoder")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)

    e = sub.add_parser("extract", help="decode hidden content with the private message decoder")
    e.add_argument("--ply", required=True)
    e.add_argument("--message-decoder", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)

    pr = sub.add_parser("prune", help="remove Gaussians (robustness attack)")
    pr.add_argument("--ply", required=True)
    pr.add_argument("--method", choices=("sequential", "random"), default="sequential")
    pr.add_argument("--ratio", type=float, required=True)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)

    m = sub.add_parser("metrics", help="PSNR/SSIM of both streams on manifest views")
    m.add_argument("--ply", required=True)
    m.add_argument("--scene-decoder")
    m.add_argument("--message-decoder")
    m.add_argument("--manifest", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--views", choices=("held-out", "all"), default="held-out")
    m.add_argument("--holdout_fraction", "--holdout-fraction", type=float, default=0.125)

    d = sub.add_parser("detect", help="steganalysis ROC of renders vs ground truth")
    d.add_argument("--ply")
    d.add_argument("--scene-decoder")
    d.add_argument("--manifest")
    d.add_argument("--positives", nargs="+", help="PNG files or directories scored as positives")
    d.add_argument("--negatives", nargs="+", help="PNG files or directories scored as negatives")
    d.add_argument("--out", required=True)
    d.add_argument("--holdout_fraction", "--holdout-fraction", type=float, default=0.125)

    w = sub.add_parser("rtws", help="fine-tune features so a watermark decodes from 2D views")
    w.add_argument("--ply", required=True)
    w.add_argument("--scene-decoder", required=True)
    w.add_argument("--message-decoder")
    w.add_argument("--manifest", required=True)
    w.add_argument("--watermark", required=True, help="PNG watermark at view resolution")
    w.add_argument("--out", required=True)
    w.add_argument("--config", help="JSON file with training fields")
    _add_train_flags(w)

    s = sub.add_parser("synth", help="write a procedural toy dataset and manifest")
    s.add_argument("--kind", choices=("scene", "image", "plain"), default="scene")
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--hidden", type=int, default=1, help="number of hidden scenes")
    s.add_argument("--designated-view", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    for sp in sub.choices.values():
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    return p


# --------------------------------------------------------------------------
# helpers


def load_config(args, allow_paths=True):
    """Merge a JSON config file with command-line overrides."""
    data = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    allowed = known | (set(PATH_KEYS) if allow_paths else set())
    unknown = set(data) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    paths = {k: data.pop(k) for k in PATH_KEYS if k in data}
    for name in known:
        val = getattr(args, name, None)
        if val is not None:
            data[name] = val
    if allow_paths:
        for k in PATH_KEYS:
            if getattr(args, k, None):
                paths[k] = getattr(args, k)
    if args.threads_given or "threads" not in data:
        data["threads"] = args.threads
    try:
        cfg = TrainConfig.from_dict(data)
    except (TypeError, InvalidParameterError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg, paths


def load_dataset(path) -> PairedDataset:
    m = assets.read_manifest(path)
    return PairedDataset(
        cameras=m["cameras"], images=m["images"], hidden=m["hidden"],
        hidden_image=m["hidden_image"], designated_view=m["designated_view"],
        seed_points=m["seed_points"],
    )


def _infer_mode(cloud, D_s, D_m, dataset):
    if cloud.mode == "feature":
        if D_m is not None and D_m.out_channels > 3:
            return "hider-multi"
        if dataset is not None and dataset.hidden_image is not None and dataset.hidden is None:
            return "hider-image"
        return "hider"
    if cloud.mode == "sh-double":
        return "baseline-sh"
    return "baseline-decoder" if D_m is not None else "baseline-3dgs"


def load_model(ply, scene_decoder=None, message_decoder=None, dataset=None, threads=1,
               need_scene=True):
    cloud = assets.read_ply(ply)
    D_s = assets.read_checkpoint(scene_decoder) if scene_decoder else None
    D_m = assets.read_checkpoint(message_decoder) if message_decoder else None
    if cloud.mode == "feature":
        if need_scene and D_s is None:
            raise UsageError("a feature-mode cloud needs --scene-decoder to render")
        for name, D in (("scene", D_s), ("message", D_m)):
            if D is not None and D.in_channels != cloud.feature_dim:
                raise ChannelMismatch(
                    f"{name} decoder expects {D.in_channels} channels, cloud carries {cloud.feature_dim}"
                )
        if D_s is not None and D_s.out_channels != 3:
            raise ChannelMismatch("scene decoder must output 3 channels")
        if D_m is not None and D_m.out_channels % 3:
            raise ChannelMismatch("message decoder output must be a multiple of 3 channels")
    else:
        if D_s is not None:
            raise ChannelMismatch("SH-mode clouds render colour directly; no scene decoder applies")
        if D_m is not None and (cloud.mode != "sh" or D_m.in_channels != 3 or D_m.out_channels != 3):
            raise ChannelMismatch("a message decoder on an SH cloud must map 3 to 3 channels")
    mode = _infer_mode(cloud, D_s, D_m, dataset)
    L = D_m.out_channels // 3 if (D_m is not None and mode == "hider-multi") else 1
    cfg = TrainConfig(mode=mode, L=L, M=max(1, cloud.feature_dim) if cloud.mode == "feature" else 16,
                      sh_degree=cloud.sh_degree if cloud.mode != "feature" else 3,
                      threads=threads)
    cfg.iterations = cfg.sh_interval * 3
    if cloud.mode == "feature" and D_s is None:
        # extract-only path: the scene stream is never requested
        D_s = _NullDecoder(cloud.feature_dim)
    return Model(cloud, D_s, D_m, cfg)


class _NullDecoder:
    """Stands in for the public decoder when only the message is extracted."""

    def __init__(self, channels):
        self.in_channels = channels
        self.out_channels = 3

    def forward(self, x, cache=None):
        return np.zeros(x.shape[:2] + (3,), dtype=np.float32)


def _config_echo(cfg):
    # thread count never changes results, so it stays out of the artifacts
    echo = cfg.to_dict()
    echo.pop("threads")
    return echo


def _write_decoders(model, out, cfg):
    if model.D_s is not None:
        assets.write_checkpoint(model.D_s, out / SCENE_DECODER_FILE, _config_echo(cfg), cfg.seed)
    if model.D_m is not None:
        assets.write_checkpoint(model.D_m, out / MESSAGE_DECODER_FILE, _config_echo(cfg), cfg.seed)


def _collect_pngs(items):
    files = []
    for it in items:
        p = Path(it)
        if p.is_dir():
            files.extend(sorted(p.glob("*.png")))
        elif p.exists():
            files.append(p)
        else:
            raise UsageError(f"no such file or directory: {p}")
    if not files:
        raise UsageError("no PNG images found")
    return files


# --------------------------------------------------------------------------
# commands


def cmd_fit(args):
    cfg, paths = load_config(args)
    if "manifest" not in paths or "out" not in paths:
        raise UsageError("fit needs a manifest and an output directory (config or flags)")
    dataset = load_dataset(paths["manifest"])
    out = Path(paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = fit(dataset, cfg, log_path=out / METRICS_FILE)
    except InvalidParameterError as exc:
        raise UsageError(str(exc)) from exc
    model = result.model
    assets.write_ply(model.cloud, out / CLOUD_FILE)
    _write_decoders(model, out, cfg)
    rep = evaluate.evaluate(model, dataset)
    evaluate.write_summary(out / SUMMARY_FILE, {
        "mode": cfg.mode, "iterations": cfg.iterations, "n_gaussians": len(model.cloud),
        **rep.summary(), "config": _config_echo(cfg),
    })
    evaluate.write_summary(out / TIMINGS_FILE, {
        "training": [[row["iteration"], row["seconds"]] for row in result.history], **rep.timings(),
    })
    return 0


def _view_name(i):
    return f"view_{i:03d}.png"


def cmd_render(args):
    dataset = load_dataset(args.manifest)
    model = load_model(args.ply, args.scene_decoder, None, dataset, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(dataset.cameras):
        I, _ = predict_view(model, cam)
        assets.save_image(I, out / _view_name(i))
    return 0


def cmd_extract(args):
    dataset = load_dataset(args.manifest)
    model = load_model(args.ply, None, args.message_decoder, dataset, args.threads,
                       need_scene=False)
    if model.D_m is None:
        raise UsageError("extract needs a message decoder")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(dataset.cameras):
        _, Ms = predict_view(model, cam)
        if len(Ms) == 1:
            assets.save_image(Ms[0], out / f"hidden_{i:03d}.png")
        else:
            for k, Mk in enumerate(Ms):
                assets.save_image(Mk, out / f"hidden_{i:03d}_{k}.png")
    return 0


def cmd_prune(args):
    if not 0.0 <= args.ratio < 1.0:
        raise UsageError("--ratio must lie in [0, 1)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cloud = assets.read_ply(args.ply)
    if int(np.floor(args.ratio * len(cloud))) == 0:
        # nothing is removed: keep the exact input bytes
        shutil.copyfile(args.ply, out / CLOUD_FILE)
        return 0
    if args.method == "sequential":
        pruned = evaluate.prune_sequential(cloud, args.ratio)
    else:
        pruned = evaluate.prune_random(cloud, args.ratio, args.seed)
    assets.write_ply(pruned, out / CLOUD_FILE)
    return 0


def cmd_metrics(args):
    dataset = load_dataset(args.manifest)
    model = load_model(args.ply, args.scene_decoder, args.message_decoder, dataset, args.threads)
    model.config.holdout_fraction = args.holdout_fraction
    views = list(range(len(dataset))) if args.views == "all" else None
    rep = evaluate.evaluate(model, dataset, views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / METRICS_FILE)
    evaluate.write_summary(out / SUMMARY_FILE, {"mode": model.config.mode, **rep.summary()})
    evaluate.write_summary(out / TIMINGS_FILE, rep.timings())
    return 0


def cmd_detect(args):
    if args.positives or args.negatives:
        if not (args.positives and args.negatives):
            raise UsageError("--positives and --negatives go together")
        pos = [evaluate.detector_score(assets.load_image(p)) for p in _collect_pngs(args.positives)]
        neg = [evaluate.detector_score(assets.load_image(p)) for p in _collect_pngs(args.negatives)]
    else:
        if not (args.ply and args.manifest):
            raise UsageError("detect needs --ply/--manifest or --positives/--negatives")
        dataset = load_dataset(args.manifest)
        model = load_model(args.ply, args.scene_decoder, None, dataset, args.threads)
        model.config.holdout_fraction = args.holdout_fraction
        pos, neg = evaluate.detection_sets([(model, dataset)])
    rep = evaluate.roc_curve(pos, neg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / ROC_FILE)
    evaluate.write_summary(out / SUMMARY_FILE, {"auc": rep.auc, "n_pos": len(pos), "n_neg": len(neg)})
    return 0


def cmd_rtws(args):
    cfg, _ = load_config(args, allow_paths=False)
    dataset = load_dataset(args.manifest)
    model = load_model(args.ply, args.scene_decoder, args.message_decoder, dataset, args.threads)
    if model.cloud.mode != "feature":
        raise UsageError("rtws needs a feature-mode cloud")
    W_cop = assets.load_image(args.watermark)
    cam = dataset.cameras[0]
    if W_cop.shape[:2] != (cam.height, cam.width):
        raise UsageError("watermark size must match the view resolution")
    cfg = cfg.replace(mode=model.config.mode, L=model.config.L, M=model.cloud.feature_dim)
    if args.iterations is not None:
        cfg = cfg.replace(rtws_iterations=args.iterations)
    res = rtws_finetune(model, dataset, W_cop, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    assets.write_ply(res.cloud, out / CLOUD_FILE)
    assets.write_checkpoint(res.E_w, out / WATERMARK_ENCODER_FILE, _config_echo(cfg), cfg.seed)
    assets.write_checkpoint(res.D_w, out / WATERMARK_DECODER_FILE, _config_echo(cfg), cfg.seed)
    tuned = Model(res.cloud, model.D_s, model.D_m, model.config)
    _, test = dataset.split(cfg.holdout_fraction)
    pw, black = [], []
    for v in test:
        I, _ = predict_view(tuned, dataset.cameras[v])
        pw.append(evaluate.psnr(res.D_w.forward(I.astype(np.float32)), W_cop))
        black.append(float(np.mean(res.D_w.forward(dataset.images[v].astype(np.float32)))))
    evaluate.write_summary(out / SUMMARY_FILE, {
        "iterations": cfg.rtws_iterations, "psnr_w": float(np.mean(pw)),
        "mean_on_ground_truth": float(np.mean(black)),
        "psnr_s": evaluate.evaluate(tuned, dataset).mean_psnr_s,
    })
    return 0


def cmd_synth(args):
    if args.views < 1 or args.size < 8:
        raise UsageError("need at least one view and size >= 8")
    ds = synthetic.make_dataset(args.kind, n_views=args.views, size=args.size, seed=args.seed,
                                n_hidden=args.hidden, designated_view=args.designated_view)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    paths = []
    hidden_paths = [] if ds.hidden is not None else None
    for i, img in enumerate(ds.images):
        rel = f"images/{_view_name(i)}"
        assets.save_image(img, out / rel)
        paths.append(rel)
        if ds.hidden is not None:
            (out / "hidden").mkdir(exist_ok=True)
            row = []
            for k, h in enumerate(ds.hidden[i]):
                hr = f"hidden/view_{i:03d}_{k}.png"
                assets.save_image(h, out / hr)
                row.append(hr)
            hidden_paths.append(row)
    hidden_image = None
    if ds.hidden_image is not None:
        hidden_image = "message.png"
        assets.save_image(ds.hidden_image, out / hidden_image)
    assets.write_point_ply(ds.seed_points[:, :3], ds.seed_points[:, 3:6], out / "points.ply")
    assets.write_manifest(out / "transforms.json", ds.cameras, paths, hidden_paths, hidden_image,
                          ds.designated_view, "points.ply")
    assets.save_image(synthetic.watermark_image(args.size), out / "watermark.png")
    return 0


COMMANDS = {
    "fit": cmd_fit, "render": cmd_render, "extract": cmd_extract, "prune": cmd_prune,
    "metrics": cmd_metrics, "detect": cmd_detect, "rtws": cmd_rtws, "synth": cmd_synth,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    given = args.threads if args.threads is not None else args.global_threads
    args.threads_given = given is not None
    args.threads = given if given is not None else 1
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        set_num_threads(args.threads)
        return COMMANDS[args.command](args)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ChannelMismatch as exc:
        print(f"channel mismatch: {exc}", file=sys.stderr)
        return EXIT_CHANNELS
    except (UsageError, InvalidParameterError, ShapeMismatchError, ManifestError, PlyError,
            CheckpointError, ImageFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
