"""Tabletop placement plus side-camera and top-down depth rendering."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, TriMesh, facing_normals, look_at, raycast_many

TABLE_GREY = 100
BACKGROUND_GREY = 30


class DoesNotFitError(Exception):
    pass


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


@dataclass(frozen=True)
class CameraConfig:
    width: int = 64
    height: int = 64
    fov_deg: float = 45.0
    pose: Pose = field(default_factory=lambda: default_camera_pose())

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("camera resolution must be at least 16x16")
        if not 10.0 < self.fov_deg < 170.0:
            raise ValueError("vertical FOV must lie in (10, 170) degrees")


def default_camera_pose(elevation_deg: float = 45.0, distance: float = 0.45,
                        target=(0.0, 0.0, 0.0)) -> Pose:
    e = math.radians(elevation_deg)
    eye = np.asarray(target, dtype=float) + distance * np.array([-math.cos(e), 0.0, math.sin(e)])
    return look_at(eye, target)


@dataclass(frozen=True)
class SceneConfig:
    # workspace rectangle on z = 0 as (xmin, ymin, xmax, ymax)
    workspace: tuple = (-0.15, -0.15, 0.15, 0.15)
    camera: CameraConfig = field(default_factory=CameraConfig)
    topdown_res: tuple = (96, 96)
    topdown_height: float = 0.5
    far: float = 2.0
    light_direction: tuple = (0.3, -0.4, 0.866)
    rng_seed: int = 0

    def __post_init__(self):
        x0, y0, x1, y1 = self.workspace
        if not (x1 > x0 and y1 > y0):
            raise ValueError("workspace must have positive area")
        if min(self.topdown_res) < 16:
            raise ValueError("top-down resolution must be at least 16x16")
        light = np.asarray(self.light_direction, dtype=float)
        object.__setattr__(self, "light_direction", tuple(light / np.linalg.norm(light)))

    @property
    def topdown_pitch(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.workspace
        cols, rows = self.topdown_res
        return (x1 - x0) / cols, (y1 - y0) / rows


@dataclass(frozen=True)
class SceneState:
    object_id: str
    mesh: TriMesh
    pose: Pose

    def __post_init__(self):
        zmin = self.pose.apply(self.mesh.vertices[np.unique(self.mesh.triangles)])[:, 2].min()
        if zmin < -1e-6:
            raise ValueError(f"object penetrates the table (min z = {zmin:.3g})")


@dataclass(frozen=True)
class CameraFrame:
    rgb: np.ndarray     # (H, W, 3) uint8
    depth: np.ndarray   # (H, W) float32 meters


def place_object(mesh: TriMesh, cfg: SceneConfig, rng: np.random.Generator) -> Pose:
    """Uniform position in the workspace, uniform yaw, resting on z = 0."""
    used = mesh.vertices[np.unique(mesh.triangles)]
    radius = float(np.max(np.hypot(used[:, 0], used[:, 1])))
    x0, y0, x1, y1 = cfg.workspace
    if 2 * radius > min(x1 - x0, y1 - y0):
        raise DoesNotFitError(f"footprint diameter {2 * radius:.3f} m exceeds the workspace")
    x = rng.uniform(x0, x1)
    y = rng.uniform(y0, y1)
    yaw = rng.uniform(0.0, 2 * math.pi)
    return Pose.from_yaw(yaw, (x, y, -float(used[:, 2].min())))


def _cast_in_object_frame(scene: SceneState, origins, directions):
    inv = scene.pose.inverse()
    o = inv.apply(origins)
    d = inv.rotate(directions)
    t, tri = raycast_many(scene.mesh, o, d)
    return t, tri, d


def camera_rays(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    cam = cfg.camera
    f = 0.5 * cam.height / math.tan(math.radians(cam.fov_deg) / 2)
    j, i = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    d = np.stack([(j + 0.5 - 0.5 * cam.width) / f,
                  (i + 0.5 - 0.5 * cam.height) / f,
                  np.ones(j.shape)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d = cam.pose.rotate(d)
    o = np.broadcast_to(np.array(cam.pose.translation), d.shape)
    return np.ascontiguousarray(o), d


def shade(normals: np.ndarray, light) -> np.ndarray:
    lam = np.maximum(0.0, normals @ np.asarray(light, dtype=float))
    return round_half_up(255.0 * (0.2 + 0.8 * lam)).clip(0, 255).astype(np.uint8)


def render_camera(scene: SceneState | None, cfg: SceneConfig) -> CameraFrame:
    """Side-camera grey render. Depth holds object hits only; everything else reads ``far``."""
    cam = cfg.camera
    o, d = camera_rays(cfg)
    n = len(d)
    depth = np.full(n, cfg.far)
    grey = np.full(n, BACKGROUND_GREY, dtype=np.uint8)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = np.where(d[:, 2] < 0, -o[:, 2] / d[:, 2], np.inf)
    grey[t_table <= cfg.far] = TABLE_GREY
    if scene is not None:
        t, tri, d_obj = _cast_in_object_frame(scene, o, d)
        hit = (tri >= 0) & (t <= cfg.far)
        if np.any(hit):
            normals = facing_normals(scene.mesh, tri[hit], d_obj[hit])
            normals = scene.pose.rotate(normals)
            grey[hit] = shade(normals, cfg.light_direction)
            depth[hit] = t[hit]
    rgb = np.repeat(grey.reshape(cam.height, cam.width, 1), 3, axis=2)
    return CameraFrame(rgb, depth.reshape(cam.height, cam.width).astype(np.float32))


def topdown_pixel_centers(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """World x (per column) and y (per row) of top-down pixel centers."""
    x0, y0, _, _ = cfg.workspace
    px, py = cfg.topdown_pitch
    cols, rows = cfg.topdown_res
    return x0 + (np.arange(cols) + 0.5) * px, y0 + (np.arange(rows) + 0.5) * py


def render_topdown_depth(scene: SceneState | None, cfg: SceneConfig) -> np.ndarray:
    """Orthographic depth below the plane z = topdown_height, rows along +y, columns along +x."""
    xs, ys = topdown_pixel_centers(cfg)
    h0 = cfg.topdown_height
    X, Y = np.meshgrid(xs, ys)
    out = np.full(X.shape, h0)
    if scene is None:
        return out
    o = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, h0)])
    t, tri, _ = _cast_in_object_frame(scene, o, np.array([[0.0, 0.0, -1.0]]))
    hit = (tri >= 0) & (t <= h0)
    flat = out.ravel()
    flat[hit] = t[hit]
    return flat.reshape(X.shape)


def depth_to_u16(depth: np.ndarray, far: float) -> np.ndarray:
    """Depth scaled so 0 m maps to 0 and ``far`` to 65535, for 16-bit PGM export."""
    return round_half_up(np.clip(depth / far, 0.0, 1.0) * 65535).astype(np.uint16)
