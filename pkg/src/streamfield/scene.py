"""Procedural dynamic scenes, their exact renderer, and the dataset format.

Ground truth is computed per ray from exact ray/primitive intersection
intervals, splitting overlaps so every segment has constant density.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import load_toml
from .geometry import Camera, CameraRig, load_rig, pixel_rays, save_rig


class SceneError(ValueError):
    pass


class DatasetError(IOError):
    pass


@dataclass
class Primitive:
    shape: str  # "sphere" | "box"
    color: tuple[float, float, float]
    density: float
    center: tuple[float, float, float]
    radius: float = 0.1
    half_extents: tuple[float, float, float] = (0.1, 0.1, 0.1)
    # (frame, x, y, z) keyframes; position is piecewise linear in frame index
    waypoints: list = field(default_factory=list)

    def position(self, k: float) -> np.ndarray:
        if not self.waypoints:
            return np.asarray(self.center, dtype=np.float64)
        wp = np.asarray(sorted(self.waypoints, key=lambda w: w[0]), dtype=np.float64)
        return np.array([np.interp(k, wp[:, 0], wp[:, i]) for i in (1, 2, 3)])

    def extent(self) -> np.ndarray:
        if self.shape == "sphere":
            return np.full(3, float(self.radius))
        return np.asarray(self.half_extents, dtype=np.float64)

    def contains(self, x: np.ndarray, k: float) -> np.ndarray:
        p = x - self.position(k)
        if self.shape == "sphere":
            return np.sum(p * p, axis=-1) <= self.radius**2
        return np.all(np.abs(p) <= self.extent(), axis=-1)

    def intersect(self, origins, dirs, k: float) -> tuple[np.ndarray, np.ndarray]:
        """Entry/exit ray depths; misses give t_in > t_out."""
        c = self.position(k)
        if self.shape == "sphere":
            oc = origins - c
            b = np.sum(oc * dirs, axis=-1)
            disc = b * b - (np.sum(oc * oc, axis=-1) - self.radius**2)
            s = np.sqrt(np.maximum(disc, 0.0))
            t0, t1 = -b - s, -b + s
            miss = disc <= 0
            t0[miss], t1[miss] = np.inf, -np.inf
            return t0, t1
        lo, hi = c - self.extent(), c + self.extent()
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (lo - origins) * inv
            tb = (hi - origins) * inv
        # a ray lying in a slab plane gives 0*inf = nan; treat that axis as unbounded
        flat = np.isnan(ta) | np.isnan(tb)
        tmin = np.where(flat, -np.inf, np.minimum(ta, tb))
        tmax = np.where(flat, np.inf, np.maximum(ta, tb))
        return tmin.max(axis=-1), tmax.min(axis=-1)


@dataclass
class SceneSpec:
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    primitives: list[Primitive] = field(default_factory=list)
    frame_count: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.frame_count < 1:
            raise SceneError("frame_count must be >= 1")
        for i, p in enumerate(self.primitives):
            if p.shape not in ("sphere", "box"):
                raise SceneError(f"primitive {i}: unknown shape {p.shape!r}")
            if p.density < 0:
                raise SceneError(f"primitive {i}: density must be >= 0")
            frames = {0, self.frame_count - 1} | {int(w[0]) for w in p.waypoints}
            for k in sorted(frames):
                if k < 0 or k >= self.frame_count:
                    continue
                c, e = p.position(k), p.extent()
                if np.any(c - e < 0) or np.any(c + e > 1):
                    raise SceneError(f"primitive {i} leaves the unit cube at frame {k}")

    def density_at(self, x: np.ndarray, k: float) -> np.ndarray:
        sigma = np.zeros(x.shape[:-1])
        for p in self.primitives:
            sigma += np.where(p.contains(x, k), p.density, 0.0)
        return sigma


@dataclass
class FrameObservation:
    index: int
    images: dict  # camera id -> (H, W, 3) float image


@dataclass
class Dataset:
    rig: CameraRig
    frames: list  # list of dict camera id -> image
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def frame(self, k: int) -> FrameObservation:
        if not 0 <= k < len(self.frames):
            raise DatasetError(f"frame {k} not in dataset of {len(self.frames)} frames")
        return FrameObservation(k, self.frames[k])


def oracle_render_rays(spec: SceneSpec, origins, dirs, k: float, near, far) -> np.ndarray:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n,))
    bg = np.asarray(spec.background, dtype=np.float64)
    if not spec.primitives:
        return np.tile(bg, (n, 1))
    t_in, t_out = [], []
    for p in spec.primitives:
        a, b = p.intersect(origins, dirs, k)
        a, b = np.maximum(a, near), np.minimum(b, far)
        miss = a >= b
        t_in.append(np.where(miss, np.inf, a))
        t_out.append(np.where(miss, np.inf, b))
    t_in, t_out = np.stack(t_in, 1), np.stack(t_out, 1)
    bounds = np.sort(np.concatenate([t_in, t_out], axis=1), axis=1)
    dens = np.array([p.density for p in spec.primitives])
    cols = np.array([p.color for p in spec.primitives], dtype=np.float64)
    color = np.zeros((n, 3))
    trans = np.ones(n)
    for j in range(bounds.shape[1] - 1):
        a, b = bounds[:, j], bounds[:, j + 1]
        ok = np.isfinite(b) & (b > a)
        with np.errstate(invalid="ignore"):
            length = np.where(ok, b - a, 0.0)
            mid = np.where(ok, 0.5 * (a + b), np.nan)
        inside = (t_in <= mid[:, None]) & (mid[:, None] <= t_out)
        sig = inside @ dens
        weighted = (inside * dens) @ cols
        seg_col = np.divide(weighted, sig[:, None], out=np.zeros_like(weighted), where=sig[:, None] > 0)
        alpha = 1.0 - np.exp(-sig * length)
        color += (trans * alpha)[:, None] * seg_col
        trans *= 1.0 - alpha
    return color + trans[:, None] * bg


def oracle_render(spec: SceneSpec, camera: Camera, k: int) -> np.ndarray:
    if not 0 <= k < spec.frame_count:
        raise SceneError(f"frame {k} outside 0..{spec.frame_count - 1}")
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    o, d = pixel_rays(camera, u.ravel(), v.ravel())
    img = oracle_render_rays(spec, o, d, k, camera.near, camera.far)
    return img.reshape(camera.height, camera.width, 3)


def generate_scene(spec: SceneSpec, rig: CameraRig) -> Dataset:
    spec.validate()
    frames = [
        {cam.id: oracle_render(spec, cam, k) for cam in rig.cameras}
        for k in range(spec.frame_count)
    ]
    return Dataset(rig=rig, frames=frames, background=tuple(spec.background))


# -- presets -----------------------------------------------------------------


def static_scene(frame_count: int = 1, background=(1.0, 1.0, 1.0)) -> SceneSpec:
    return SceneSpec(
        background=background,
        primitives=[
            Primitive("sphere", (0.85, 0.2, 0.15), 150.0, (0.42, 0.55, 0.5), radius=0.17),
            Primitive("box", (0.15, 0.35, 0.8), 150.0, (0.68, 0.35, 0.55), half_extents=(0.1, 0.1, 0.1)),
        ],
        frame_count=frame_count,
    )


def moving_sphere_scene(frame_count: int = 30, background=(1.0, 1.0, 1.0), laps: float = 1.0) -> SceneSpec:
    """A static box plus a sphere circling the cube center in the image plane."""
    angles = np.linspace(0, 2 * np.pi * laps, 13)
    frames = np.linspace(0, frame_count - 1, 13)
    waypoints = [
        [float(f), 0.5 + 0.2 * np.cos(a), 0.5 + 0.2 * np.sin(a), 0.45] for f, a in zip(frames, angles)
    ]
    return SceneSpec(
        background=background,
        primitives=[
            Primitive("sphere", (0.9, 0.25, 0.1), 150.0, tuple(waypoints[0][1:]), radius=0.13, waypoints=waypoints),
            Primitive("box", (0.1, 0.45, 0.85), 150.0, (0.5, 0.5, 0.72), half_extents=(0.12, 0.12, 0.08)),
        ],
        frame_count=frame_count,
    )


# -- files -------------------------------------------------------------------


def scene_spec_from_dict(d: dict) -> SceneSpec:
    prims = []
    for p in d.get("primitives", []):
        prims.append(
            Primitive(
                shape=p["shape"],
                color=tuple(p["color"]),
                density=float(p["density"]),
                center=tuple(p.get("center", (0.5, 0.5, 0.5))),
                radius=float(p.get("radius", 0.1)),
                half_extents=tuple(p.get("half_extents", (0.1, 0.1, 0.1))),
                waypoints=[list(w) for w in p.get("waypoints", [])],
            )
        )
    spec = SceneSpec(
        background=tuple(d.get("background", (1.0, 1.0, 1.0))),
        primitives=prims,
        frame_count=int(d.get("frame_count", 1)),
        seed=int(d.get("seed", 0)),
    )
    spec.validate()
    return spec


def load_scene_spec(path) -> SceneSpec:
    d = load_toml(path)
    preset = d.pop("preset", None)
    if preset is not None:
        presets = {"static": static_scene, "moving-sphere": moving_sphere_scene}
        if preset not in presets:
            raise SceneError(f"{path}: unknown preset {preset!r}")
        spec = presets[preset](int(d.get("frame_count", 30)))
        if "background" in d:
            spec.background = tuple(d["background"])
        spec.validate()
        return spec
    return scene_spec_from_dict(d)


def _frame_path(root: Path, cam_id: str, k: int) -> Path:
    return root / "frames" / cam_id / f"{k:05d}.png"


def write_dataset(dataset: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    save_rig(dataset.rig, root / "cameras.json")
    (root / "meta.json").write_text(
        json.dumps({"frame_count": dataset.frame_count, "background": list(dataset.background)})
    )
    for k, frame in enumerate(dataset.frames):
        for cam_id, img in frame.items():
            p = _frame_path(root, cam_id, k)
            p.parent.mkdir(parents=True, exist_ok=True)
            q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
            Image.fromarray(q).save(p)


def load_dataset(path) -> Dataset:
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise DatasetError(f"missing camera file {cam_file}")
    rig = load_rig(cam_file)
    meta = json.loads((root / "meta.json").read_text()) if (root / "meta.json").exists() else {}
    if "frame_count" in meta:
        frame_count = int(meta["frame_count"])
    else:
        first = root / "frames" / rig.train_cameras[0].id
        names = [f for f in first.glob("*.png") if re.fullmatch(r"\d{5}\.png", f.name)] if first.is_dir() else []
        if not names:
            raise DatasetError(f"no frames found under {first}")
        frame_count = max(int(f.stem) for f in names) + 1
    frames = []
    for k in range(frame_count):
        frame = {}
        for cam in rig.cameras:
            p = _frame_path(root, cam.id, k)
            if not p.exists():
                raise DatasetError(f"missing frame {k} for camera {cam.id}: {p}")
            arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
            if arr.shape != (cam.height, cam.width, 3):
                raise DatasetError(
                    f"{p}: image is {arr.shape[1]}x{arr.shape[0]}, camera {cam.id} expects "
                    f"{cam.width}x{cam.height}"
                )
            frame[cam.id] = arr
        frames.append(frame)
    return Dataset(rig=rig, frames=frames, background=tuple(meta.get("background", (0.0, 0.0, 0.0))))
