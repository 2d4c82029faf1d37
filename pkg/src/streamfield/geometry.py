"""Pinhole cameras, ray generation and world-to-pixel projection.

Pixel convention: continuous coordinates with pixel (u, v) covering
[u, u+1) x [v, v+1), so its center sits at (u+0.5, v+0.5). Camera frame is
x right, y down, z forward.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    id: str
    width: int
    height: int
    intrinsics: np.ndarray  # 3x3
    extrinsics: np.ndarray  # 3x4 world-to-camera [R | t]
    near: float
    far: float

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        E = np.asarray(self.extrinsics, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", E)
        K.flags.writeable = False
        E.flags.writeable = False
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise GeometryError(f"camera {self.id}: focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise GeometryError(f"camera {self.id}: need 0 < near < far")
        R = E[:, :3]
        if np.abs(R @ R.T - np.eye(3)).max() >= 1e-6:
            raise GeometryError(f"camera {self.id}: rotation block is not orthonormal")

    @property
    def R(self) -> np.ndarray:
        return self.extrinsics[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.extrinsics[:, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit forward direction in world coordinates."""
        return self.R[2].copy()

    @property
    def projection(self) -> np.ndarray:
        """The 3x4 matrix intrinsics @ extrinsics."""
        return self.intrinsics @ self.extrinsics


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[float, float]


@dataclass(frozen=True)
class CameraRig:
    train_cameras: tuple[Camera, ...]
    test_cameras: tuple[Camera, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "train_cameras", tuple(self.train_cameras))
        object.__setattr__(self, "test_cameras", tuple(self.test_cameras))
        if not self.train_cameras:
            raise GeometryError("rig needs at least one train camera")
        sizes = {(c.width, c.height) for c in self.cameras}
        if len(sizes) != 1:
            raise GeometryError(f"cameras in one rig must share image size, got {sorted(sizes)}")
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise GeometryError("camera ids must be unique")

    @property
    def cameras(self) -> tuple[Camera, ...]:
        return self.train_cameras + self.test_cameras

    def camera(self, cam_id: str) -> Camera:
        for cam in self.cameras:
            if cam.id == cam_id:
                return cam
        raise KeyError(f"no camera with id {cam_id!r}")


def pixel_rays(camera: Camera, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ray generation through pixel centers (u+0.5, v+0.5).

    Returns (origins, directions), each of shape (..., 3).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    K = camera.intrinsics
    fx, fy, cx, cy, skew = K[0, 0], K[1, 1], K[0, 2], K[1, 2], K[0, 1]
    y = (v + 0.5 - cy) / fy
    x = (u + 0.5 - cx - skew * y) / fx
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_world = d_cam @ camera.R  # R^T d for row vectors
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


def ray_for_pixel(camera: Camera, u: float, v: float) -> Ray:
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise IndexError(
            f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image of camera {camera.id}"
        )
    o, d = pixel_rays(camera, u, v)
    return Ray(origin=o, direction=d, pixel=(float(u), float(v)))


def project_points(camera: Camera, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points of shape (..., 3).

    Returns (uv, depth, valid). Invalid projections are flagged, never raised.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = x @ camera.R.T + camera.t
    depth = xc[..., 2]
    h = xc @ camera.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[..., :2] / h[..., 2:3]
    valid = (
        (depth > 0)
        & np.all(np.isfinite(uv), axis=-1)
        & (uv[..., 0] >= 0)
        & (uv[..., 0] < camera.width)
        & (uv[..., 1] >= 0)
        & (uv[..., 1] < camera.height)
    )
    return uv, depth, valid


def project_point(camera: Camera, x) -> dict:
    uv, depth, valid = project_points(camera, np.asarray(x, dtype=np.float64).reshape(3))
    return {"uv": uv, "depth": float(depth), "valid": bool(valid)}


def look_at_extrinsics(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise GeometryError("look-at target coincides with camera position")
    forward /= dist
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return np.concatenate([R, (-R @ position)[:, None]], axis=1)


def make_forward_facing_rig(
    rows: int = 3,
    cols: int = 4,
    spread: float = 40.0,
    distance: float = 1.6,
    look_at=(0.5, 0.5, 0.5),
    width: int = 64,
    height: int = 64,
    fov: float = 40.0,
    near: float | None = None,
    far: float | None = None,
) -> CameraRig:
    """Grid of cameras on a spherical patch facing +z toward `look_at`.

    Train cameras span `spread` degrees horizontally (over cols) and
    vertically (over rows); the single test camera sits at the patch center.
    """
    if rows < 1 or cols < 1:
        raise GeometryError("rows and cols must be >= 1")
    if not (0 < spread < 180):
        raise GeometryError("spread must be in (0, 180) degrees")
    if distance <= 0:
        raise GeometryError("camera distance must be positive")
    target = np.asarray(look_at, dtype=np.float64)
    near = max(distance - 0.9, 1e-3) if near is None else near
    far = distance + 0.9 if far is None else far
    focal = 0.5 * width / math.tan(math.radians(fov) / 2)
    K = np.array([[focal, 0.0, width / 2], [0.0, focal, height / 2], [0.0, 0.0, 1.0]])

    def place(cam_id, yaw_deg, pitch_deg):
        yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
        offset = np.array(
            [math.sin(yaw) * math.cos(pitch), math.sin(pitch), -math.cos(yaw) * math.cos(pitch)]
        )
        pos = target + distance * offset
        return Camera(cam_id, width, height, K, look_at_extrinsics(pos, target), near, far)

    def angles(n):
        return [0.0] if n == 1 else list(np.linspace(-spread / 2, spread / 2, n))

    train = [
        place(f"train_{r}_{c}", yaw, pitch)
        for r, pitch in enumerate(angles(rows))
        for c, yaw in enumerate(angles(cols))
    ]
    return CameraRig(train_cameras=train, test_cameras=[place("test", 0.0, 0.0)])


def camera_to_dict(camera: Camera, role: str) -> dict:
    K = camera.intrinsics
    return {
        "id": camera.id,
        "width": camera.width,
        "height": camera.height,
        "fx": float(K[0, 0]),
        "fy": float(K[1, 1]),
        "cx": float(K[0, 2]),
        "cy": float(K[1, 2]),
        "R": [float(v) for v in camera.R.reshape(-1)],
        "t": [float(v) for v in camera.t],
        "near": camera.near,
        "far": camera.far,
        "role": role,
    }


def camera_from_dict(d: dict) -> Camera:
    K = np.array([[d["fx"], 0.0, d["cx"]], [0.0, d["fy"], d["cy"]], [0.0, 0.0, 1.0]])
    R = np.asarray(d["R"], dtype=np.float64).reshape(3, 3)
    t = np.asarray(d["t"], dtype=np.float64).reshape(3, 1)
    return Camera(
        str(d["id"]), int(d["width"]), int(d["height"]), K, np.hstack([R, t]),
        float(d["near"]), float(d["far"]),
    )


def save_rig(rig: CameraRig, path) -> None:
    entries = [camera_to_dict(c, "train") for c in rig.train_cameras]
    entries += [camera_to_dict(c, "test") for c in rig.test_cameras]
    Path(path).write_text(json.dumps(entries, indent=1))


def load_rig(path) -> CameraRig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"camera file not found: {path}")
    entries = json.loads(path.read_text())
    train, test = [], []
    for e in entries:
        role = e.get("role", "train")
        if role not in ("train", "test"):
            raise GeometryError(f"{path}: camera {e.get('id')} has unknown role {role!r}")
        (train if role == "train" else test).append(camera_from_dict(e))
    return CameraRig(train, test)
