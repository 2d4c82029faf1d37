"""Extrapolation test, component ablations and iteration-budget sweeps."""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import trainer
from .config import ConfigError, TrainConfig, load_toml, load_train_config, train_config_from_dict
from .geometry import make_forward_facing_rig
from .metrics import psnr
from .scene import Dataset, generate_scene, load_dataset, load_scene_spec

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "no-projected-color": {"use_mean": False, "use_variance": False},
    "no-occ-transition": {"occ_transition": False},
    "neither": {"use_mean": False, "use_variance": False, "occ_transition": False},
    "space-time": {"model_variant": "space-time"},
    "literal-update": {"occ_update": "literal"},
    "global-update": {"occ_update": "global"},
    "mean-only": {"use_variance": False},
    "var-only": {"use_mean": False},
}

# settings that only act after frame 0, so variants differing in them share a warm-up
_STREAM_ONLY = ("occ_transition", "occ_update", "occ_decay", "iters_per_frame", "global_points_per_voxel",
                "kernel_size", "kernel_stddev")

ABLATION_HEADER = [
    "variant", "iters_per_frame", "frames", "mean_psnr_db", "eval_psnr_db", "median_train_ms",
    "median_render_ms", "train_fps", "render_fps", "total_fps", "mean_samples_per_ray", "status",
]


def variant_config(base: TrainConfig, name: str, overrides: dict | None = None) -> TrainConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return base.replace(**{**VARIANTS[name], **(overrides or {})})


def _warmup_key(cfg: TrainConfig):
    d = dataclasses.asdict(cfg)
    for k in _STREAM_ONLY:
        d.pop(k)
    return repr(sorted(d.items()))


class WarmupCache:
    """Warm-up states keyed by every setting that can influence frame 0."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.pool = trainer.RayPool(dataset.rig)
        self.states = {}

    def get(self, cfg: TrainConfig) -> trainer.FrameState:
        key = _warmup_key(cfg)
        if key not in self.states:
            self.states[key] = trainer.warmup_first_frame(self.dataset, cfg, pool=self.pool)
        return self.states[key]


# -- extrapolation -----------------------------------------------------------------


def extrapolation_eval(dataset: Dataset, cfg: TrainConfig, variants=("projected-color", "space-time"),
                       cache: WarmupCache | None = None) -> list[dict]:
    """Render frame k from the state trained through k-1, then train on k and render again.

    For the projected-color model the extrapolated render uses frame k's
    training images as conditioning; the space-time model uses t = k. Rows:
    {variant, frame, extrapolation_psnr_db, reconstruction_psnr_db, lag_psnr_db}
    where lag_psnr_db compares the extrapolated render with frame k-1.
    """
    if dataset.frame_count < 3:
        raise ValueError("extrapolation needs at least 3 frames")
    rig = dataset.rig
    cam = trainer.eval_camera(rig)
    pool = cache.pool if cache else trainer.RayPool(rig)
    cache = cache or WarmupCache(dataset)
    rows = []
    for variant in variants:
        vcfg = cfg.replace(model_variant=variant)
        state = copy.deepcopy(cache.get(vcfg))
        n = dataset.frame_count
        for k in range(1, n):
            frame = dataset.frame(k)
            trainer.begin_frame(state, frame, rig, n)
            extra = trainer.render_view(state, frame, rig, n, cam, dataset.background)["image"]
            trainer.optimize_frame(state, frame, rig, n, dataset.background, pool)
            recon = trainer.render_view(state, frame, rig, n, cam, dataset.background)["image"]
            truth = frame.images[cam.id]
            rows.append({
                "variant": variant,
                "frame": k,
                "extrapolation_psnr_db": psnr(extra, truth),
                "reconstruction_psnr_db": psnr(recon, truth),
                "lag_psnr_db": psnr(extra, dataset.frames[k - 1][cam.id]),
            })
            log.info("%s frame %d extrapolation %.2f dB reconstruction %.2f dB", variant, k,
                     rows[-1]["extrapolation_psnr_db"], rows[-1]["reconstruction_psnr_db"])
    return rows


def summarize_extrapolation(rows: list[dict]) -> dict:
    out = {}
    for v in dict.fromkeys(r["variant"] for r in rows):
        sub = [r for r in rows if r["variant"] == v]
        out[v] = {k: float(np.mean([r[k] for r in sub]))
                  for k in ("extrapolation_psnr_db", "reconstruction_psnr_db", "lag_psnr_db")}
    return out


def write_rows(rows: list[dict], path, header: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})


# -- ablation ----------------------------------------------------------------------


@dataclass
class AblationSpec:
    variants: list
    dataset: Dataset
    config: TrainConfig = field(default_factory=TrainConfig)
    overrides: dict = field(default_factory=dict)  # variant -> config overrides
    j_sweep: list = field(default_factory=list)
    eval_from: int = 5  # first frame of the eval_psnr_db average

    def __post_init__(self):
        if len(self.variants) < 2:
            raise ConfigError("an ablation needs at least two variants")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
        for v, over in self.overrides.items():
            if "seed" in over:
                raise ConfigError(f"variant {v}: all variants share one seed")


def load_ablation_spec(path) -> AblationSpec:
    """TOML spec: variants, scene or dataset, optional config, rig, overrides, j_sweep."""
    path = Path(path)
    d = load_toml(path)
    root = path.parent
    if "variants" not in d:
        raise ConfigError(f"{path}: missing 'variants'")
    cfg = TrainConfig()
    if "config" in d:
        cfg = load_train_config(root / d["config"])
    if "train" in d:
        merged = {**dataclasses.asdict(cfg), **d["train"]}
        merged["field"] = {**dataclasses.asdict(cfg.field), **d["train"].get("field", {})}
        cfg = train_config_from_dict(merged)
    if "dataset" in d:
        dataset = load_dataset(root / d["dataset"])
    elif "scene" in d:
        rig = make_forward_facing_rig(**d.get("rig", {}))
        dataset = generate_scene(load_scene_spec(root / d["scene"]), rig)
    else:
        raise ConfigError(f"{path}: need 'scene' or 'dataset'")
    return AblationSpec(
        variants=list(d["variants"]),
        dataset=dataset,
        config=cfg,
        overrides=d.get("overrides", {}),
        j_sweep=[int(j) for j in d.get("j_sweep", [])],
        eval_from=int(d.get("eval_from", 5)),
    )


def _summary(variant: str, cfg: TrainConfig, rows: list[dict], eval_from: int) -> dict:
    later = [r for r in rows if r["frame"] >= 1]
    train = statistics.median(r["train_ms"] for r in later) if later else float("nan")
    render = statistics.median(r["render_ms"] for r in later) if later else float("nan")
    ev = [r["psnr_db"] for r in rows if r["frame"] >= eval_from] or [r["psnr_db"] for r in rows]
    return {
        "variant": variant,
        "iters_per_frame": cfg.iters_per_frame,
        "frames": len(rows),
        "mean_psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
        "eval_psnr_db": float(np.mean(ev)),
        "median_train_ms": train,
        "median_render_ms": render,
        "train_fps": 1000 / train if train > 0 else float("inf"),
        "render_fps": 1000 / render if render > 0 else float("inf"),
        "total_fps": 1000 / (train + render) if train + render > 0 else float("inf"),
        "mean_samples_per_ray": float(np.mean([r["mean_samples_per_ray"] for r in rows])),
        "status": "ok",
        "per_frame_psnr": [r["psnr_db"] for r in rows],
    }


def run_ablation(spec: AblationSpec, out_dir=None) -> list[dict]:
    """One summary row per (variant, J); a failing variant yields a row with its error."""
    cache = WarmupCache(spec.dataset)
    budgets = spec.j_sweep or [spec.config.iters_per_frame]
    results = []
    for variant in spec.variants:
        for j in budgets:
            t0 = time.perf_counter()
            try:
                cfg = variant_config(spec.config, variant, {**spec.overrides.get(variant, {}), "iters_per_frame": j})
                rows, _ = trainer.stream(spec.dataset, cfg, warm_state=cache.get(cfg))
                results.append(_summary(variant, cfg, rows, spec.eval_from))
            except Exception as e:  # one variant's failure must not stop the others
                log.exception("variant %s failed", variant)
                results.append({"variant": variant, "iters_per_frame": j, "status": f"error: {e}"})
            log.info("variant %s J=%d done in %.0f s", variant, j, time.perf_counter() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(results, out / "ablation.csv", ABLATION_HEADER)
    return results
