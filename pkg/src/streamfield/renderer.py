"""Discrete volume rendering over occupancy-filtered ray samples.

Samples live on a dense (rays, n) layout; rejected samples simply carry zero
density, which is equivalent to dropping them since every kept sample keeps
its own interval length.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import Camera, pixel_rays
from .occgrid import OccupancyGrid, keep_mask, occupancy_score

DEPTH_EPS = 1e-10


@dataclass
class RenderResult:
    color: np.ndarray  # (R, 3), without background
    final_transmittance: np.ndarray  # (R,)
    expected_depth: np.ndarray  # (R,)
    sample_count: np.ndarray  # (R,)
    weights: np.ndarray | None = None  # (R, n)


@dataclass
class RenderConfig:
    n_samples: int = 128
    sigma_min: float = 0.0  # density threshold; converted to an occupancy score per grid
    keep_interval: int = 20
    deterministic: bool = True
    chunk: int = 4096


def sample_uniform(near, far, n: int, rng: np.random.Generator | None = None):
    """Stratified samples in n equal bins per ray.

    Midpoints when `rng` is None, uniformly jittered inside each bin otherwise.
    Returns (t, delta), each (R, n).
    """
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if n < 1:
        raise ValueError("need at least one sample")
    if np.any(far <= near):
        raise ValueError("need near < far")
    width = (far - near) / n
    offset = 0.5 if rng is None else rng.random((len(near), n))
    t = near[:, None] + (np.arange(n)[None, :] + offset) * width[:, None]
    return t, np.broadcast_to(width[:, None], t.shape).copy()


def unit_cube_span(origins, dirs, near, far):
    """Clip [near, far] to the unit cube per ray; returns (t0, t1, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = -origins * inv
        tb = (1.0 - origins) * inv
    flat = np.isnan(ta) | np.isnan(tb)
    t0 = np.where(flat, -np.inf, np.minimum(ta, tb)).max(axis=-1)
    t1 = np.where(flat, np.inf, np.maximum(ta, tb)).min(axis=-1)
    t0 = np.maximum(t0, near)
    t1 = np.minimum(t1, far)
    return t0, t1, t1 > t0 + 1e-9


def composite(sigma, color, delta, t, check: bool = True) -> RenderResult:
    """Alpha compositing of ordered samples: sum_i T_i (1 - exp(-sigma_i delta_i)) c_i."""
    sigma = np.asarray(sigma)
    delta = np.asarray(delta)
    squeeze = sigma.ndim == 1
    if squeeze:
        sigma, delta, t = sigma[None], delta[None], np.asarray(t)[None]
        color = np.asarray(color)[None]
    if check and (np.any(sigma < 0) or np.any(delta < 0)):
        raise ValueError("negative density or interval length")
    a = sigma * delta
    cum = np.cumsum(a, axis=1)
    trans = np.exp(-(cum - a))
    alpha = -np.expm1(-a)
    w = trans * alpha
    col = np.einsum("rn,rnc->rc", w, color)
    wsum = w.sum(axis=1)
    depth = (w * t).sum(axis=1) / np.maximum(wsum, DEPTH_EPS)
    res = RenderResult(col, np.exp(-cum[:, -1]), depth, (sigma > 0).sum(axis=1), w)
    if squeeze:
        res = RenderResult(col[0], res.final_transmittance[0], depth[0], res.sample_count[0], w[0])
    return res


def composite_backward(sigma, color, delta, t, result: RenderResult, grad_color, grad_depth=None, background=None):
    """Gradients w.r.t. per-sample (sigma, color) of grad_color . (C + T_final * bg) + grad_depth * depth."""
    w = result.weights
    a = sigma * delta
    trans_next = np.exp(-np.cumsum(a, axis=1))  # T_{i+1}
    t_final = result.final_transmittance
    g = np.asarray(grad_color)
    gc = np.einsum("rnc,rc->rn", color, g)  # g . c_i
    wg = w * gc
    after = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1] - wg  # sum_{j>i} w_j g.c_j
    d_a = trans_next * gc - after
    if background is not None:
        d_a -= (t_final * (g @ np.asarray(background, dtype=g.dtype)))[:, None]
    if grad_depth is not None:
        gd = np.asarray(grad_depth)
        wt = w * t
        after_t = np.cumsum(wt[:, ::-1], axis=1)[:, ::-1] - wt
        d_num = trans_next * t - after_t
        wsum = 1.0 - t_final
        denom = np.maximum(wsum, DEPTH_EPS)
        d_depth = np.where(
            (wsum > DEPTH_EPS)[:, None],
            (d_num - result.expected_depth[:, None] * t_final[:, None]) / denom[:, None],
            d_num / DEPTH_EPS,
        )
        d_a += gd[:, None] * d_depth
    d_sigma = d_a * delta
    d_color = w[..., None] * g[:, None, :]
    return d_sigma, d_color


@dataclass
class RayBatch:
    """Everything a backward pass needs from one rendered batch."""

    t: np.ndarray
    delta: np.ndarray
    kept: np.ndarray  # (R, n) bool
    points: np.ndarray  # (K, 3) kept sample positions
    dirs: np.ndarray  # (K, 3)
    sigma: np.ndarray  # (R, n)
    color: np.ndarray  # (R, n, 3)
    result: RenderResult


def render_rays(evaluate, grid: OccupancyGrid | None, origins, dirs, near, far, cfg: RenderConfig,
                rng: np.random.Generator | None = None, dtype=np.float64) -> RayBatch:
    """Sample, filter, evaluate and composite a batch of rays.

    `evaluate(points, dirs)` returns a FieldOutput for the kept samples.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    r = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (r,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (r,))
    t0, t1, hit = unit_cube_span(origins, dirs, near, far)
    t0 = np.where(hit, t0, 0.0)
    t1 = np.where(hit, t1, 1.0)
    t, delta = sample_uniform(t0, t1, cfg.n_samples, None if cfg.deterministic else rng)
    pts = np.clip(origins[:, None, :] + t[..., None] * dirs[:, None, :], 0.0, 1.0)
    if grid is not None:
        occ = grid.values[grid.voxel_index(pts.reshape(-1, 3))].reshape(t.shape)
        kept = keep_mask(occ, float(occupancy_score(cfg.sigma_min, grid.resolution)), cfg.keep_interval)
    else:
        kept = np.ones(t.shape, dtype=bool)
    kept &= hit[:, None]
    kp = pts[kept]
    kd = np.broadcast_to(dirs[:, None, :], pts.shape)[kept]
    sigma = np.zeros(t.shape, dtype=dtype)
    color = np.zeros(t.shape + (3,), dtype=dtype)
    if len(kp):
        out = evaluate(kp, kd)
        sigma[kept] = out.sigma
        color[kept] = out.color
    t = t.astype(dtype)
    delta = delta.astype(dtype)
    res = composite(sigma, color, delta, t, check=False)
    res.sample_count = kept.sum(axis=1)
    return RayBatch(t, delta, kept, kp, kd, sigma, color, res)


def render_image(evaluate, grid: OccupancyGrid | None, camera: Camera, background, cfg: RenderConfig,
                 dtype=np.float64) -> dict:
    """Render a full image; returns {"image", "depth", "mean_samples_per_ray"}."""
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    origins, dirs = pixel_rays(camera, u.ravel(), v.ravel())
    bg = np.asarray(background, dtype=np.float64)
    colors, depths, counts = [], [], []
    for s in range(0, len(origins), cfg.chunk):
        b = render_rays(evaluate, grid, origins[s : s + cfg.chunk], dirs[s : s + cfg.chunk],
                        camera.near, camera.far, cfg, dtype=dtype)
        colors.append(b.result.color + b.result.final_transmittance[:, None] * bg)
        depths.append(b.result.expected_depth)
        counts.append(b.result.sample_count)
    shape = (camera.height, camera.width)
    return {
        "image": np.concatenate(colors).reshape(*shape, 3).astype(np.float64),
        "depth": np.concatenate(depths).reshape(shape).astype(np.float64),
        "mean_samples_per_ray": float(np.concatenate(counts).mean()),
    }


def save_image(image: np.ndarray, path) -> None:
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path)


def save_depth(depth: np.ndarray, far: float, path) -> None:
    q = np.round(np.clip(depth / far, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)
