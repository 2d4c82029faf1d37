"""Probabilistic occupancy grid over the unit cube.

Each voxel stores the probability that it holds positive density. At every
frame boundary the grid is blurred by a Gaussian transition kernel to account
for unknown motion, then raised during training at the points the field was
evaluated. Ray samples are rejected when their voxel falls below a density
threshold, except for a fixed stride of safety samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

UPDATE_MODES = ("monotone-max", "literal", "decay-max")
DECAY = 0.8


class GridError(ValueError):
    pass


@dataclass
class OccupancyGrid:
    values: np.ndarray  # (N, N, N) indexed [ix, iy, iz]
    frame_index: int = 0
    iteration_index: int = 0

    @classmethod
    def full(cls, resolution: int = 64, value: float = 1.0) -> "OccupancyGrid":
        return cls(np.full((resolution,) * 3, value, dtype=np.float64))

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.values.copy(), self.frame_index, self.iteration_index)

    def voxel_index(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        n = self.resolution
        ijk = np.clip(np.floor(x * n), 0, n - 1).astype(np.int64)
        return ijk[:, 0], ijk[:, 1], ijk[:, 2]

    def lookup(self, x) -> np.ndarray:
        return self.values[self.voxel_index(x)]

    def voxel_centers(self) -> np.ndarray:
        n = self.resolution
        c = (np.arange(n) + 0.5) / n
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)

    def step(self) -> None:
        """Mark the end of one optimisation iteration."""
        self.iteration_index += 1


@dataclass(frozen=True)
class TransitionKernel:
    weights: np.ndarray
    stddev: float

    @classmethod
    def gaussian(cls, size: int = 3, stddev: float = 0.8) -> "TransitionKernel":
        if size < 1 or size % 2 == 0:
            raise GridError("kernel size must be a positive odd number")
        r = np.arange(size) - size // 2
        if stddev <= 0:
            g = (r == 0).astype(np.float64)
        else:
            g = np.exp(-0.5 * (r / stddev) ** 2)
        w = g[:, None, None] * g[None, :, None] * g[None, None, :]
        return cls(w / w.sum(), float(stddev))

    @classmethod
    def delta(cls, size: int = 3) -> "TransitionKernel":
        return cls.gaussian(size, 0.0)


@dataclass(frozen=True)
class SamplerConfig:
    keep_interval: int = 20
    sigma_min_start: float = 1.0
    sigma_min_end: float = 0.05
    end_frame: int = 10
    update_mode: str = "monotone-max"

    def __post_init__(self):
        if self.keep_interval < 1:
            raise GridError("keep interval R must be >= 1")
        if not 0 <= self.sigma_min_end <= self.sigma_min_start <= 1:
            raise GridError("need 0 <= end <= start <= 1 for the threshold schedule")
        if self.update_mode not in UPDATE_MODES:
            raise GridError(f"unknown update mode {self.update_mode!r}")


def transition(grid: OccupancyGrid, kernel: TransitionKernel) -> OccupancyGrid:
    if any(k > n for k, n in zip(kernel.weights.shape, grid.values.shape)):
        raise GridError("transition kernel is larger than the grid")
    out = ndimage.convolve(grid.values, kernel.weights, mode="nearest")
    return OccupancyGrid(np.clip(out, 0.0, 1.0), grid.frame_index + 1, 0)


def occupancy_score(sigma, resolution: int) -> np.ndarray:
    """Map density to an occupancy probability over one voxel length."""
    return -np.expm1(-np.asarray(sigma, dtype=np.float64) / resolution)


def update_at(grid: OccupancyGrid, x, sigma, mode: str = "monotone-max", decay: float = DECAY) -> None:
    """Update the grid at evaluated points in place.

    Batches are reduced per voxel to the strongest observation before the
    rule is applied, so a batch update does not depend on point order.
    "decay-max" scales each touched voxel by `decay` before taking the max,
    which lets repeatedly observed empty space fall off an all-ones grid.
    """
    if mode not in UPDATE_MODES:
        raise GridError(f"unknown update mode {mode!r}")
    s = occupancy_score(np.asarray(sigma).reshape(-1), grid.resolution)
    if s.size == 0:
        return
    ix, iy, iz = grid.voxel_index(x)
    n = grid.resolution
    flat = (ix * n + iy) * n + iz
    best = np.full(n**3, -1.0)
    np.maximum.at(best, flat, s)
    touched = np.flatnonzero(best >= 0)
    obs = best[touched]
    vals = grid.values.reshape(-1)
    cur = vals[touched]
    if mode == "monotone-max":
        new = np.maximum(cur, obs)
    elif mode == "literal":
        new = np.where(obs < cur, cur, np.clip(obs * cur, 0.0, 1.0))
    else:
        new = np.maximum(decay * cur, obs)
    vals[touched] = new


def keep_mask(occupancy: np.ndarray, sigma_min: float, keep_interval: int) -> np.ndarray:
    """Vectorised rejection rule over (..., n) samples in ray order."""
    i = np.arange(occupancy.shape[-1])
    stride = (i % keep_interval) == (keep_interval // 2)
    return (occupancy >= sigma_min) | stride


def rejection_filter(grid: OccupancyGrid, samples, sigma_min: float, keep_interval: int = 20) -> np.ndarray:
    """Indices of the ray-ordered sample positions (n, 3) that survive rejection."""
    occ = grid.lookup(samples)
    return np.flatnonzero(keep_mask(occ, sigma_min, keep_interval))


def threshold_schedule(frame_index: int, config: SamplerConfig = SamplerConfig()) -> float:
    """Density threshold: linear from start at frame 1 to end at `end_frame`, then flat."""
    if frame_index < 1:
        raise GridError("threshold schedule starts at frame 1")
    if frame_index >= config.end_frame:
        return config.sigma_min_end
    f = (frame_index - 1) / (config.end_frame - 1)
    return config.sigma_min_start + f * (config.sigma_min_end - config.sigma_min_start)


def global_update_baseline(grid: OccupancyGrid, evaluate, points_per_voxel: int, rng: np.random.Generator) -> OccupancyGrid:
    """Resample every voxel at random points and overwrite it, ignoring prior values.

    `evaluate` maps (M, 3) points to (M,) densities.
    """
    n = grid.resolution
    corner = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), axis=-1).reshape(-1, 1, 3)
    pts = (corner + rng.random((n**3, points_per_voxel, 3))) / n
    sigma = np.asarray(evaluate(pts.reshape(-1, 3))).reshape(n**3, points_per_voxel)
    vals = occupancy_score(sigma, n).max(axis=1).reshape(n, n, n)
    return OccupancyGrid(vals, grid.frame_index, grid.iteration_index)


def dump_grid(grid: OccupancyGrid, path) -> None:
    """Write raw little-endian float32 voxels plus a JSON sidecar."""
    path = Path(path)
    grid.values.astype("<f4").tofile(path)
    Path(str(path) + ".json").write_text(
        json.dumps({"resolution": grid.resolution, "frame_index": grid.frame_index, "order": "C[ix,iy,iz]"})
    )


def load_grid(path) -> OccupancyGrid:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    n = int(meta["resolution"])
    vals = np.fromfile(path, dtype="<f4").astype(np.float64).reshape(n, n, n)
    return OccupancyGrid(vals, int(meta.get("frame_index", 0)))
