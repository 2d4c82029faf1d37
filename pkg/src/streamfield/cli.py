"""Command-line entry points."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .config import ConfigError, TrainConfig, load_train_config, train_config_from_dict, train_config_to_dict
from .experiments import (
    extrapolation_eval,
    load_ablation_spec,
    run_ablation,
    summarize_extrapolation,
    write_rows,
)
from .field import FieldError, load_checkpoint, save_checkpoint
from .geometry import GeometryError, make_forward_facing_rig
from .metrics import psnr
from .occgrid import GridError, dump_grid, load_grid
from .renderer import RenderConfig, render_image, save_depth, save_image
from .scene import DatasetError, SceneError, generate_scene, load_dataset, load_scene_spec, write_dataset

log = logging.getLogger("streamfield")

EXPECTED_ERRORS = (ConfigError, DatasetError, SceneError, GeometryError, FieldError, GridError,
                   FileNotFoundError, KeyError, ValueError, OSError)


def _config(path, deterministic: bool = False) -> TrainConfig:
    cfg = load_train_config(path) if path else TrainConfig()
    return cfg.replace(deterministic=True) if deterministic else cfg


def cmd_gen_scene(args) -> None:
    spec = load_scene_spec(args.spec)
    rig = make_forward_facing_rig(args.rows, args.cols, args.spread, width=args.size, height=args.size)
    write_dataset(generate_scene(spec, rig), args.out_dir)
    print(f"wrote {spec.frame_count} frames x {len(rig.cameras)} cameras to {args.out_dir}")


def cmd_stream(args) -> None:
    dataset = load_dataset(args.dataset)
    cfg = _config(args.config, args.deterministic)
    out = Path(args.out)
    (out / "renders").mkdir(parents=True, exist_ok=True)
    metrics = trainer.CsvSink(out / "metrics.csv", deterministic=cfg.deterministic)
    timings = trainer.CsvSink(out / "timings.csv") if cfg.deterministic else None
    far = trainer.eval_camera(dataset.rig).far

    def save_render(row):
        save_image(row["image"], out / "renders" / f"{row['frame']:05d}.png")
        save_depth(row["depth"], far, out / "renders" / f"{row['frame']:05d}_depth.png")

    sinks = [metrics, save_render] + ([timings] if timings else [])
    try:
        rows, state = trainer.stream(dataset, cfg, sinks=sinks)
    finally:
        metrics.close()
        if timings:
            timings.close()
    extra = {"train_config": train_config_to_dict(cfg), "frame_index": state.frame_index}
    save_checkpoint(state.model.params, out / "checkpoint.sfld", extra)
    dump_grid(state.grid, out / "grid.bin")
    psnrs = [r["psnr_db"] for r in rows]
    print(f"{len(rows)} frames, PSNR mean {np.mean(psnrs):.2f} dB (min {min(psnrs):.2f}, max {max(psnrs):.2f})")


def cmd_render(args) -> None:
    params, extra = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if "train_config" not in extra:
        raise FieldError(f"{args.checkpoint}: checkpoint carries no training config")
    cfg = train_config_from_dict(extra["train_config"])
    grid_path = Path(args.grid) if args.grid else Path(args.checkpoint).with_name("grid.bin")
    grid = load_grid(grid_path) if grid_path.exists() else None
    camera = dataset.rig.camera(args.camera)
    frame = dataset.frame(args.frame)
    evaluate = trainer.Model(params, cfg).evaluator(frame, dataset.rig, dataset.frame_count)
    smin = trainer.sigma_min_for(args.frame, cfg) if grid is not None else 0.0
    out = render_image(evaluate, grid, camera, dataset.background,
                       RenderConfig(cfg.n_samples, smin, cfg.keep_interval), dtype=params.dtype)
    dest = Path(args.out) / "renders" / f"{args.frame:05d}_{camera.id}.png"
    dest.parent.mkdir(parents=True, exist_ok=True)
    save_image(out["image"], dest)
    msg = f"wrote {dest}"
    if camera.id in frame.images:
        msg += f" (PSNR {psnr(out['image'], frame.images[camera.id]):.2f} dB)"
    print(msg)


def cmd_eval_extrapolation(args) -> None:
    dataset = load_dataset(args.dataset)
    cfg = _config(args.config)
    rows = extrapolation_eval(dataset, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(rows, out / "extrapolation.csv",
               ["variant", "frame", "extrapolation_psnr_db", "reconstruction_psnr_db", "lag_psnr_db"])
    summary = summarize_extrapolation(rows)
    (out / "extrapolation_summary.json").write_text(json.dumps(summary, indent=1))
    for v, s in summary.items():
        print(f"{v}: extrapolation {s['extrapolation_psnr_db']:.2f} dB, "
              f"reconstruction {s['reconstruction_psnr_db']:.2f} dB, vs previous frame {s['lag_psnr_db']:.2f} dB")


def cmd_ablate(args) -> None:
    spec = load_ablation_spec(args.spec)
    rows = run_ablation(spec, args.out)
    for r in rows:
        if r["status"] == "ok":
            print(f"{r['variant']:>20s} J={r['iters_per_frame']:<3d} PSNR {r['mean_psnr_db']:.2f} dB "
                  f"(frames >= {spec.eval_from}: {r['eval_psnr_db']:.2f}) train {r['median_train_ms']:.0f} ms")
        else:
            print(f"{r['variant']:>20s} J={r['iters_per_frame']:<3d} {r['status']}")
    if any(r["status"] != "ok" for r in rows):
        raise RuntimeError("some ablation variants failed")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamfield", description="On-the-fly dynamic radiance field streaming.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render a procedural scene spec into a dataset directory")
    g.add_argument("spec")
    g.add_argument("out_dir")
    g.add_argument("--rows", type=int, default=3)
    g.add_argument("--cols", type=int, default=4)
    g.add_argument("--spread", type=float, default=40.0)
    g.add_argument("--size", type=int, default=64, help="image width and height in pixels")
    g.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("stream", help="train and render a dataset frame by frame")
    s.add_argument("dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_stream)

    r = sub.add_parser("render", help="render one camera of one frame from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("dataset")
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--camera", required=True)
    r.add_argument("--grid", help="occupancy grid dump (default: grid.bin next to the checkpoint)")
    r.add_argument("--out", default=".")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval-extrapolation", help="render frame k before training on it, per model variant")
    e.add_argument("dataset")
    e.add_argument("--config", required=True)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval_extrapolation)

    a = sub.add_parser("ablate", help="run an ablation spec")
    a.add_argument("spec")
    a.add_argument("--out", default=".")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (*EXPECTED_ERRORS, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
