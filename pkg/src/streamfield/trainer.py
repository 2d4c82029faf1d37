"""On-the-fly training loop.

The field for frame k is the field for frame k-1 optimised for a few
iterations against frame k's images only. The occupancy grid is transitioned
once at every frame boundary and raised at evaluated samples during training.
"""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .field import FieldParams, field_backward, field_forward, init_params, new_tape, spacetime_forward
from .geometry import CameraRig, pixel_rays
from .metrics import psnr
from .occgrid import (
    DECAY,
    OccupancyGrid,
    SamplerConfig,
    TransitionKernel,
    global_update_baseline,
    threshold_schedule,
    transition,
    update_at,
)
from .optim import Adam
from .projcolor import projected_color_stats_batch
from .renderer import RenderConfig, composite_backward, render_image, render_rays
from .scene import Dataset, DatasetError, FrameObservation

log = logging.getLogger(__name__)

METRICS_HEADER = ["frame", "psnr_db", "train_ms", "render_ms", "mean_samples_per_ray"]
DEPTH_COLOR_EPS = 1e-4


# -- losses ----------------------------------------------------------------------


def rgb_loss(rendered, target) -> tuple[float, np.ndarray]:
    """Mean over rays of the squared L2 color error, and its gradient."""
    rendered = np.asarray(rendered)
    target = np.asarray(target)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    diff = rendered - target
    n = diff.shape[0]
    return float((diff * diff).sum() / n), 2.0 * diff / n


def depth_smoothness_loss(patch_depths, patch_colors, d_far: float, eps: float = DEPTH_COLOR_EPS) -> float:
    """std(d_far / d) / max(std(c), eps) over one 3x3 patch."""
    d = np.asarray(patch_depths, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("patch depths must be positive")
    c = np.asarray(patch_colors, dtype=np.float64).ravel()
    inv = d_far / d
    # shifting by one element keeps the std exactly 0 on constant patches
    return float(np.std(inv - inv[0]) / max(np.std(c - c[0]), eps))


def depth_smoothness_batch(depths, colors, d_far, eps: float = DEPTH_COLOR_EPS):
    """Batched patch loss: depths (P, 9), colors (P, 9, 3), d_far (P,) or scalar.

    Returns (mean loss over patches, d loss / d depths). Depths are clamped
    to a small positive floor so empty rays do not blow up.
    """
    d = np.maximum(depths, 1e-3)
    d_far = np.broadcast_to(np.asarray(d_far, dtype=d.dtype), (len(d),))[:, None]
    inv = d_far / d
    inv = inv - inv[:, :1]
    mu = inv.mean(axis=1, keepdims=True)
    sd = np.sqrt(((inv - mu) ** 2).mean(axis=1, keepdims=True))
    csd = np.maximum(colors.reshape(len(colors), -1).std(axis=1, keepdims=True), eps)
    loss = sd / csd
    dsd = np.where(sd > 0, (inv - mu) / (inv.shape[1] * np.maximum(sd, 1e-30)), 0.0)
    grad = dsd / csd * (-d_far / d**2) * (depths > 1e-3)
    p = len(d)
    return float(loss.mean()), grad / p


# -- model -----------------------------------------------------------------------


def normalized_time(k: int, frame_count: int) -> float:
    return 0.0 if frame_count <= 1 else k / (frame_count - 1)


@dataclass
class Model:
    params: FieldParams
    config: TrainConfig

    def evaluator(self, frame: FrameObservation, rig: CameraRig, frame_count: int, tape=None):
        """Field closure for one frame: (points, dirs) -> FieldOutput."""
        cfg = self.config
        dt = self.params.dtype
        if cfg.model_variant == "space-time":
            t = normalized_time(frame.index, frame_count)

            def evaluate(x, d):
                return spacetime_forward(x, d, t, self.params, tape)
        else:
            gate = np.array([cfg.use_mean] * 3 + [cfg.use_variance] * 3, dtype=dt)

            def evaluate(x, d):
                if gate.any():
                    feats = projected_color_stats_batch(x, frame.images, rig, dtype=dt).features()
                else:
                    feats = np.zeros((len(x), 6), dtype=dt)
                return field_forward(x, d, feats * gate, self.params, tape)

        return evaluate


@dataclass
class FrameState:
    frame_index: int
    model: Model
    optimizer: Adam
    grid: OccupancyGrid
    observation: FrameObservation | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    losses: list = field(default_factory=list)
    samples_per_ray: list = field(default_factory=list)
    warmup_ms: float = 0.0


def sampler_config(cfg: TrainConfig) -> SamplerConfig:
    return SamplerConfig(cfg.keep_interval, cfg.sigma_min_start, cfg.sigma_min_end,
                         cfg.sigma_min_end_frame, "monotone-max" if cfg.occ_update == "global" else cfg.occ_update)


def sigma_min_for(frame_index: int, cfg: TrainConfig) -> float:
    return threshold_schedule(max(frame_index, 1), sampler_config(cfg))


class RayPool:
    """Cached rays and pixel colors of the train cameras for one frame."""

    def __init__(self, rig: CameraRig):
        self.rig = rig
        cam = rig.train_cameras[0]
        self.width, self.height = cam.width, cam.height
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        rays = [pixel_rays(c, u.ravel(), v.ravel()) for c in rig.train_cameras]
        self.origins = np.stack([o for o, _ in rays])  # (M, H*W, 3)
        self.dirs = np.stack([d for _, d in rays])
        self.near = np.array([c.near for c in rig.train_cameras])
        self.far = np.array([c.far for c in rig.train_cameras])

    def pixels(self, frame: FrameObservation) -> np.ndarray:
        """(M, H*W, 3) train-camera colors of `frame`, cached for the current frame."""
        if getattr(self, "_cached", (None,))[0] is not frame:
            imgs = np.stack([np.asarray(frame.images[c.id]).reshape(-1, 3) for c in self.rig.train_cameras])
            self._cached = (frame, imgs)
        return self._cached[1]

    def sample_patches(self, n_patches: int, rng: np.random.Generator):
        """Random 3x3 pixel patches: camera index (P,) and flat pixel index (P, 9)."""
        m = len(self.rig.train_cameras)
        cams = rng.integers(0, m, n_patches)
        x0 = rng.integers(0, self.width - 2, n_patches)
        y0 = rng.integers(0, self.height - 2, n_patches)
        dy, dx = np.divmod(np.arange(9), 3)
        pix = (y0[:, None] + dy) * self.width + (x0[:, None] + dx)
        return cams, pix


def _train_iteration(state: FrameState, frame: FrameObservation, pool: RayPool, cfg: TrainConfig,
                     frame_count: int, sigma_min: float, update_mode: str | None, background,
                     decay: float = DECAY) -> float:
    model = state.model
    dt = model.params.dtype
    rng = state.rng
    n_patches = max(1, cfg.rays_per_iter // 9)
    cams, pix = pool.sample_patches(n_patches, rng)
    cam_rep = np.repeat(cams, 9)
    flat_pix = pix.ravel()
    origins = pool.origins[cam_rep, flat_pix]
    dirs = pool.dirs[cam_rep, flat_pix]
    target = pool.pixels(frame)[cam_rep, flat_pix]
    tape = new_tape(model.params)
    evaluate = model.evaluator(frame, pool.rig, frame_count, tape)
    rcfg = RenderConfig(cfg.n_samples, sigma_min, cfg.keep_interval, cfg.deterministic)
    batch = render_rays(evaluate, state.grid, origins, dirs, pool.near[cam_rep], pool.far[cam_rep],
                        rcfg, rng=rng, dtype=dt)
    res = batch.result
    bg = np.asarray(background, dtype=dt)
    pred = res.color + res.final_transmittance[:, None] * bg
    loss, g_color = rgb_loss(pred, target.astype(dt))
    g_depth = None
    if cfg.depth_loss_weight > 0:
        dl, gd = depth_smoothness_batch(res.expected_depth.reshape(-1, 9), target.reshape(-1, 9, 3),
                                        pool.far[cams])
        loss += cfg.depth_loss_weight * dl
        g_depth = (cfg.depth_loss_weight * gd).reshape(-1).astype(dt)
    d_sigma, d_color = composite_backward(batch.sigma, batch.color, batch.delta, batch.t, res,
                                          g_color.astype(dt), g_depth, bg)
    if len(batch.points):
        grads = field_backward(tape, d_sigma[batch.kept], d_color[batch.kept], model.params)
        try:
            state.optimizer.step(model.params.arrays, grads)
        except FloatingPointError as e:
            log.warning("skipping iteration at frame %d: %s", frame.index, e)
        if update_mode is not None:
            update_at(state.grid, batch.points, tape.sigma, update_mode, decay)
    state.grid.step()
    state.losses.append(loss)
    state.samples_per_ray.append(float(res.sample_count.mean()))
    return loss


def new_state(cfg: TrainConfig, dtype=np.float32) -> FrameState:
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.field, rng, dtype)
    opt = Adam(lr={k: (cfg.lr_hash if k == "tables" else cfg.lr_mlp) for k in params.arrays})
    grid = OccupancyGrid.full(cfg.grid_resolution, 1.0)
    return FrameState(0, Model(params, cfg), opt, grid, rng=rng)


def warmup_first_frame(dataset: Dataset, cfg: TrainConfig, dtype=np.float32, pool: RayPool | None = None) -> FrameState:
    """Train on frame 0 only, starting from an all-ones grid.

    Grid updates during warm-up decay each touched voxel before taking the
    max, so empty space is carved out of the initial all-ones grid.
    """
    t0 = time.perf_counter()
    state = new_state(cfg, dtype)
    frame = dataset.frame(0)
    state.observation = frame
    pool = pool or RayPool(dataset.rig)
    sigma_min = sigma_min_for(1, cfg)
    for _ in range(cfg.warmup_iters):
        _train_iteration(state, frame, pool, cfg, dataset.frame_count, sigma_min, "decay-max",
                         dataset.background, cfg.warmup_decay)
    state.warmup_ms = 1000 * (time.perf_counter() - t0)
    return state


def begin_frame(state: FrameState, frame: FrameObservation, rig: CameraRig, frame_count: int) -> None:
    """Frame-boundary transition of the occupancy grid, before any iteration of the new frame."""
    cfg = state.model.config
    if frame.index != state.frame_index + 1:
        raise DatasetError(f"expected frame {state.frame_index + 1}, got {frame.index}")
    if cfg.occ_update == "global":
        evaluate = state.model.evaluator(frame, rig, frame_count)
        dirs = np.array([0.0, 0.0, 1.0])

        def density(x):
            out = []
            for s in range(0, len(x), 1 << 16):
                chunk = x[s : s + (1 << 16)]
                out.append(evaluate(chunk, np.broadcast_to(dirs, chunk.shape)).sigma)
            return np.concatenate(out)

        state.grid = global_update_baseline(state.grid, density, cfg.global_points_per_voxel, state.rng)
        state.grid.frame_index += 1
        state.grid.iteration_index = 0
    elif cfg.occ_transition:
        state.grid = transition(state.grid, TransitionKernel.gaussian(cfg.kernel_size, cfg.kernel_stddev))
    else:
        state.grid = OccupancyGrid(state.grid.values, state.grid.frame_index + 1, 0)
    state.frame_index = frame.index
    state.observation = frame


def optimize_frame(state: FrameState, frame: FrameObservation, rig: CameraRig, frame_count: int,
                   background=(0.0, 0.0, 0.0), pool: RayPool | None = None) -> FrameState:
    """J iterations against the current frame, after its transition."""
    cfg = state.model.config
    if state.frame_index != frame.index:
        raise DatasetError(f"state is at frame {state.frame_index}, cannot optimise frame {frame.index}")
    pool = pool or RayPool(rig)
    sigma_min = sigma_min_for(frame.index, cfg)
    mode = None if cfg.occ_update == "global" else cfg.occ_update
    for _ in range(cfg.iters_per_frame):
        _train_iteration(state, frame, pool, cfg, frame_count, sigma_min, mode, background, cfg.occ_decay)
    return state


def train_frame(state: FrameState, frame: FrameObservation, rig: CameraRig, frame_count: int,
                background=(0.0, 0.0, 0.0), pool: RayPool | None = None) -> FrameState:
    """Transition, then J iterations against frame k's train images only."""
    begin_frame(state, frame, rig, frame_count)
    return optimize_frame(state, frame, rig, frame_count, background, pool)


def eval_camera(rig: CameraRig):
    return rig.test_cameras[0] if rig.test_cameras else rig.train_cameras[0]


def render_view(state: FrameState, frame: FrameObservation, rig: CameraRig, frame_count: int, camera,
                background, sigma_min: float | None = None) -> dict:
    cfg = state.model.config
    evaluate = state.model.evaluator(frame, rig, frame_count)
    smin = sigma_min_for(frame.index, cfg) if sigma_min is None else sigma_min
    rcfg = RenderConfig(cfg.n_samples, smin, cfg.keep_interval, deterministic=True)
    return render_image(evaluate, state.grid, camera, background, rcfg, dtype=state.model.params.dtype)


class CsvSink:
    """Writes metric rows to a CSV file, flushing after every row."""

    def __init__(self, path, deterministic: bool = False):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(METRICS_HEADER)
        self.deterministic = deterministic

    def __call__(self, row: dict) -> None:
        train_ms = 0.0 if self.deterministic else row["train_ms"]
        render_ms = 0.0 if self.deterministic else row["render_ms"]
        self.writer.writerow([
            row["frame"], f"{row['psnr_db']:.4f}", f"{train_ms:.3f}", f"{render_ms:.3f}",
            f"{row['mean_samples_per_ray']:.3f}",
        ])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def stream(dataset: Dataset, cfg: TrainConfig, sinks=(), dtype=np.float32, on_frame=None,
           warm_state: FrameState | None = None) -> tuple[list, FrameState]:
    """Warm up on frame 0, then train and render frame by frame.

    Each sink receives one metrics dict per frame (the rendered test view is
    included under "image" and "depth"). `on_frame(state, frame)` is an
    optional hook called after each frame's training. A precomputed
    `warm_state` is copied and used instead of running the warm-up.
    """
    rig = dataset.rig
    cam = eval_camera(rig)
    pool = RayPool(rig)
    rows = []

    def emit(state, frame, train_s):
        t0 = time.perf_counter()
        out = render_view(state, frame, rig, dataset.frame_count, cam, dataset.background)
        render_s = time.perf_counter() - t0
        row = {
            "frame": frame.index,
            "psnr_db": psnr(out["image"], frame.images[cam.id]),
            "train_ms": 1000 * train_s,
            "render_ms": 1000 * render_s,
            "mean_samples_per_ray": out["mean_samples_per_ray"],
            "image": out["image"],
            "depth": out["depth"],
        }
        rows.append(row)
        for sink in sinks:
            sink(row)
        log.info("frame %d psnr %.2f dB train %.0f ms", frame.index, row["psnr_db"], row["train_ms"])

    if warm_state is None:
        state = warmup_first_frame(dataset, cfg, dtype, pool)
    else:
        state = copy.deepcopy(warm_state)
        state.model = Model(state.model.params, cfg)
    frame0 = state.observation
    if on_frame:
        on_frame(state, frame0)
    emit(state, frame0, state.warmup_ms / 1000)
    for k in range(1, dataset.frame_count):
        frame = dataset.frame(k)
        t0 = time.perf_counter()
        train_frame(state, frame, rig, dataset.frame_count, dataset.background, pool)
        train_s = time.perf_counter() - t0
        if on_frame:
            on_frame(state, frame)
        emit(state, frame, train_s)
    return rows, state
