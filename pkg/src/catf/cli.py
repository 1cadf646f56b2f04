"""Command-line entry point: dataset generation, training, evaluation,
prediction overlays, rasters, and the attention benchmark.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  All randomness is
controlled by --seed; every run echoes its resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bench import VARIANTS, bench_attention, render_report
from .metrics import evaluate_dataset, write_metrics
from .model import ModelConfig
from .scene import GenConfig, RasterConfig, TEMPLATES, generate_scene, load_dataset, save_dataset, rasterize
from .training import (TrainConfig, baseline_records, load_model, predict_records,
                       prepare_sample, prepare_samples, split_samples, train)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _echo_config(name: str, cfg: dict):
    print(f"[{name}] resolved config:")
    for key in sorted(cfg):
        print(f"  {key} = {cfg[key]}")


def _model_config(preset: str, **overrides) -> ModelConfig:
    if preset == "desk":
        return ModelConfig.desk(**overrides)
    if preset == "paper":
        return ModelConfig.paper(**overrides)
    raise UsageError(f"unknown preset {preset!r} (choose desk or paper)")


# -- subcommands --------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg = GenConfig(template=args.template, num_agents=args.agents,
                    noise=args.noise, fork_split=args.fork_split)
    _echo_config("gen-data", {**asdict(cfg), "scenes": args.scenes,
                              "seed": args.seed, "out": args.out})
    scenes = [generate_scene(cfg, args.seed + i) for i in range(args.scenes)]
    save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


_TRAIN_FLAG_FIELDS = {"batch_size": "batch_size", "epochs": "epochs",
                      "lr": "base_lr", "warmup_epochs": "warmup_epochs",
                      "seed": "seed", "attention": "attention",
                      "val_eval_scenes": "val_eval_scenes"}


def _cmd_train(args) -> int:
    # Layered resolution: preset defaults, then config file, then explicit flags.
    overrides: dict = {}
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        valid = set(asdict(TrainConfig()).keys())
        unknown = set(file_cfg) - valid
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        overrides.update(file_cfg)
    for flag, field in _TRAIN_FLAG_FIELDS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    if args.no_context:
        overrides["use_context"] = False
    if args.no_offroad:
        overrides["use_offroad_loss"] = False
    overrides["preset"] = args.preset
    model_cfg = _model_config(args.preset)
    train_cfg = TrainConfig(**overrides)
    _echo_config("train", {**asdict(train_cfg), "data": args.data,
                           "out_dir": args.out_dir})
    scenes = load_dataset(args.data)
    samples = prepare_samples(scenes, model_cfg, train_cfg.grid_cell_size)
    result = train(samples, model_cfg, train_cfg, out_dir=args.out_dir)
    print(f"best validation minADE_3: {result.best_val_ade3:.4f}")
    print(f"checkpoint written to {Path(args.out_dir) / 'model.ckpt'}")
    return 0


def _load_model_dir(checkpoint: str):
    ckpt_dir = Path(checkpoint)
    if ckpt_dir.is_dir():
        return load_model(ckpt_dir / "model.ckpt", ckpt_dir / "model.cfg")
    return load_model(ckpt_dir, ckpt_dir.with_suffix(".cfg"))


def _cmd_eval(args) -> int:
    model, _ = _load_model_dir(args.checkpoint)
    _echo_config("eval", {"checkpoint": args.checkpoint, "data": args.data,
                          "report": args.report, "split": args.split,
                          "seed": args.seed, "baseline": args.baseline})
    scenes = load_dataset(args.data)
    samples = prepare_samples(scenes, model.config)
    if args.split != "all":
        _, val, test = split_samples(samples, args.seed)
        samples = val if args.split == "val" else test
    if not samples:
        raise RuntimeError(f"no samples in split {args.split!r}")
    if args.baseline:
        records = baseline_records(samples, model.config.H)
    else:
        records = predict_records(model, samples)
    table = evaluate_dataset(records)
    write_metrics(table, args.report)
    print(table.to_text())
    print(f"report written to {args.report}")
    return 0


def _cmd_predict(args) -> int:
    model, _ = _load_model_dir(args.checkpoint)
    _echo_config("predict", {"checkpoint": args.checkpoint, "data": args.data,
                             "scene_id": args.scene_id, "overlay_out": args.overlay_out})
    scenes = load_dataset(args.data)
    matches = [s for s in scenes if s.scene_id == args.scene_id]
    if not matches:
        raise RuntimeError(f"scene {args.scene_id!r} not found in {args.data}")
    scene = matches[0]
    sample = prepare_sample(scene, scene.target_ids()[0], model.config)
    pred = model.predict(sample.raster if model.config.use_context else None,
                         sample.target_hist, sample.av_hist)
    _render_overlay(sample, pred, args.overlay_out)
    labels = ", ".join(f"mode{k}={c:.2f}" for k, c in enumerate(pred.credibility))
    print(f"credibilities: {labels} (sum {pred.credibility.sum():.2f})")
    print(f"overlay written to {args.overlay_out}")
    return 0


def _render_overlay(sample, pred, out_path):
    from PIL import Image, ImageDraw

    raster = sample.raster
    n = raster.pixels.shape[0]
    scale = max(1, 512 // n)
    rgb = (np.clip(raster.pixels, 0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(rgb[::-1], "RGB").resize((n * scale, n * scale),
                                                   Image.NEAREST)
    draw = ImageDraw.Draw(img)

    def to_px(point):
        col = (point[0] - raster.origin[0]) / raster.resolution * scale
        row = (point[1] - raster.origin[1]) / raster.resolution * scale
        return (col, n * scale - row)

    colors = [(255, 80, 80), (80, 255, 120), (120, 160, 255),
              (255, 220, 80), (255, 120, 255), (120, 255, 255)]
    for k, traj in enumerate(pred.trajectories):
        color = colors[k % len(colors)]
        draw.line([to_px(p) for p in traj], fill=color, width=2)
        label_at = to_px(traj[-1])
        draw.text(label_at, f"{pred.credibility[k]:.2f}", fill=color)
    img.save(out_path)


def _cmd_rasterize(args) -> int:
    scenes = load_dataset(args.data)
    matches = [s for s in scenes if s.scene_id == args.scene_id]
    if not matches:
        raise RuntimeError(f"scene {args.scene_id!r} not found in {args.data}")
    scene = matches[0]
    cfg = RasterConfig(size_px=args.size_px, resolution=args.resolution)
    _echo_config("rasterize", {**asdict(cfg), "data": args.data,
                               "scene_id": args.scene_id, "out": args.out})
    raster = rasterize(scene, scene.target_ids()[0], cfg)
    from PIL import Image
    rgb = (np.clip(raster.pixels, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(rgb[::-1], "RGB").save(args.out)
    print(f"raster written to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    variants = tuple(args.variants.split(","))
    seq_lens = tuple(int(v) for v in args.seq_lens.split(","))
    _echo_config("bench", {"variants": variants, "seq_lens": seq_lens, "p": args.p,
                           "repetitions": args.repetitions, "seed": args.seed,
                           "report_dir": args.report_dir})
    report = bench_attention(variants=variants, seq_lens=seq_lens, p=args.p,
                             repetitions=args.repetitions, seed=args.seed)
    slopes = render_report(report, args.report_dir)
    for variant, slope in sorted(slopes.items()):
        print(f"{variant}: fitted log-log slope {slope:.2f}")
    print(f"report written to {args.report_dir}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="catf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--template", choices=TEMPLATES, required=True)
    g.add_argument("--scenes", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--agents", type=int, default=2)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--fork-split", type=float, default=0.5)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--preset", default="desk")
    t.add_argument("--config", default=None,
                   help="JSON file of training-config overrides; "
                        "explicit flags take precedence over it")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--warmup-epochs", type=int, default=None)
    t.add_argument("--no-context", action="store_true")
    t.add_argument("--no-offroad", action="store_true")
    t.add_argument("--attention", choices=("full", "linear", "linear_shared"),
                   default=None)
    t.add_argument("--val-eval-scenes", type=int, default=None)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", choices=("test", "val", "all"), default="test")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--baseline", action="store_true",
                   help="evaluate the constant-velocity baseline instead")
    e.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="render a prediction overlay for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id", required=True)
    p.add_argument("--overlay-out", required=True)
    p.set_defaults(func=_cmd_predict)

    b = sub.add_parser("bench", help="attention scaling benchmark")
    b.add_argument("--variants", default="full,linear")
    b.add_argument("--seq-lens", default="128,256,512,1024")
    b.add_argument("--p", type=int, default=64)
    b.add_argument("--repetitions", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--report-dir", required=True)
    b.set_defaults(func=_cmd_bench)

    r = sub.add_parser("rasterize", help="write a scene raster as PNG")
    r.add_argument("--data", required=True)
    r.add_argument("--scene-id", required=True)
    r.add_argument("--size-px", type=int, default=224)
    r.add_argument("--resolution", type=float, default=0.25)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_rasterize)

    return parser


def run(argv=None) -> int:
    threads = os.environ.get("CATF_THREADS")
    if threads is not None:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (UsageError, SystemExit) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
