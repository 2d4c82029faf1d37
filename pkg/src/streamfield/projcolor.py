"""Multi-view projected color statistics of 3D points.

A point is projected into every training image of the current frame; the
mean and population variance of the sampled colors condition the field.
Occlusion is ignored: every camera with a valid projection contributes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraRig

# returned when no camera sees the point
EMPTY_MEAN = (0.0, 0.0, 0.0)
EMPTY_VARIANCE = (1.0, 1.0, 1.0)


@dataclass
class ProjectedColorStats:
    mean: np.ndarray  # (..., 3)
    variance: np.ndarray  # (..., 3)
    valid_count: np.ndarray  # (...,)

    def __len__(self):
        return len(self.mean)

    def take(self, idx) -> "ProjectedColorStats":
        return ProjectedColorStats(self.mean[idx], self.variance[idx], self.valid_count[idx])

    def features(self) -> np.ndarray:
        return np.concatenate([self.mean, self.variance], axis=-1)


def bilinear_sample(image: np.ndarray, uv) -> np.ndarray:
    """Sample an (H, W, C) image at continuous pixel coordinates uv (..., 2).

    Pixel centers sit at half-integers; lookups clamp to the edge pixels.
    """
    uv = np.asarray(uv, dtype=np.float64)
    h, w = image.shape[:2]
    u, v = uv[..., 0], uv[..., 1]
    if np.any(~((u >= 0) & (u < w) & (v >= 0) & (v < h))):
        raise ValueError("uv outside image bounds; check projection validity first")
    return _bilinear(image.reshape(h * w, -1), w, h, u, v)


def _bilinear(flat: np.ndarray, w: int, h: int, u, v) -> np.ndarray:
    px, py = u - 0.5, v - 0.5
    x0f, y0f = np.floor(px), np.floor(py)
    fx, fy = (px - x0f)[..., None], (py - y0f)[..., None]
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    top = flat[y0 * w + x0] * (1 - fx) + flat[y0 * w + x1] * fx
    bot = flat[y1 * w + x0] * (1 - fx) + flat[y1 * w + x1] * fx
    return top * (1 - fy) + bot * fy


def projected_color_stats_batch(points, images: dict, rig: CameraRig, dtype=np.float64) -> ProjectedColorStats:
    """Vectorised stats for points of shape (N, 3) over the rig's train cameras."""
    cams = rig.train_cameras
    points = np.asarray(points, dtype=dtype).reshape(-1, 3)
    m = len(cams)
    w, h = cams[0].width, cams[0].height
    proj = np.stack([c.projection for c in cams]).astype(dtype)  # (M, 3, 4)
    hom = np.matmul(points[None], proj[:, :, :3].transpose(0, 2, 1)) + proj[:, None, :, 3]
    depth = hom[..., 2]  # intrinsics have last row (0, 0, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = hom[..., 0] / depth
        v = hom[..., 1] / depth
    valid = (depth > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)  # (M, N); nan compares False
    u = np.where(valid, u, 0.5)
    v = np.where(valid, v, 0.5)
    flat = np.concatenate([np.asarray(images[c.id], dtype=dtype).reshape(-1, 3) for c in cams])
    offset = (np.arange(m) * (w * h))[:, None]
    px, py = u - 0.5, v - 0.5
    x0f, y0f = np.floor(px), np.floor(py)
    fx = (px - x0f).astype(dtype)[..., None]
    fy = (py - y0f).astype(dtype)[..., None]
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1) * w + offset
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1) * w + offset
    top = flat[y0 + x0] * (1 - fx) + flat[y0 + x1] * fx
    bot = flat[y1 + x0] * (1 - fx) + flat[y1 + x1] * fx
    samples = top * (1 - fy) + bot * fy  # (M, N, 3)
    mask = valid[..., None]
    count = valid.sum(axis=0)
    safe = np.maximum(count, 1)[:, None].astype(dtype)
    mean = np.where(mask, samples, 0).sum(axis=0) / safe
    dev = np.where(mask, samples - mean, 0)
    var = (dev * dev).sum(axis=0) / safe
    empty = count == 0
    mean[empty] = EMPTY_MEAN
    var[empty] = EMPTY_VARIANCE
    return ProjectedColorStats(mean.astype(dtype), var.astype(dtype), count)


def projected_color_stats(x, frame, rig: CameraRig) -> ProjectedColorStats:
    """Stats for a single point; `frame` is a FrameObservation or a camera-id -> image map."""
    images = getattr(frame, "images", frame)
    missing = [c.id for c in rig.train_cameras if c.id not in images]
    if missing:
        raise KeyError(f"frame has no image for train cameras {missing}")
    s = projected_color_stats_batch(np.asarray(x).reshape(1, 3), images, rig)
    return ProjectedColorStats(s.mean[0], s.variance[0], int(s.valid_count[0]))
