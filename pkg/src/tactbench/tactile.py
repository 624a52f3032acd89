"""Gel-displacement tactile sensor model.

The sensor frame puts the undeformed gel surface on the plane x = 0 with its
outward normal along +x; pixels tile the (y, z) rectangle of the gel. A
heightmap has shape (H, W): row i spans z, column j spans y.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, TriMesh, raycast_many
from .scene import round_half_up

DEFAULT_MIN_PIXELS = 100
DEFAULT_MIN_DEPTH = 0.0001


@dataclass(frozen=True)
class SensorGeom:
    gel_width: float = 0.016
    gel_height: float = 0.024
    gel_thickness: float = 0.002
    resolution: tuple = (40, 60)  # (W, H)
    k_gel: float = 4e7            # N / m^3
    pose_in_finger: Pose = field(default_factory=Pose)
    smoothing_sigma: float = 0.0  # pixels; 0 disables the optional blur

    def __post_init__(self):
        w, h = self.resolution
        if min(self.gel_width, self.gel_height, self.gel_thickness, self.k_gel) <= 0 or min(w, h) <= 0:
            raise ValueError("sensor dimensions must be positive")
        if abs(self.gel_width / w - self.gel_height / h) > 1e-9:
            raise ValueError("sensor pixels must be square")

    @property
    def pitch(self) -> float:
        return self.gel_width / self.resolution[0]

    @property
    def pixel_area(self) -> float:
        return self.pitch * self.pitch

    @property
    def shape(self) -> tuple[int, int]:
        return self.resolution[1], self.resolution[0]

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Sensor-frame (y, z) coordinates of pixel centers, each of shape (H, W)."""
        w, h = self.resolution
        y = (np.arange(w) + 0.5) * self.pitch - 0.5 * self.gel_width
        z = (np.arange(h) + 0.5) * self.pitch - 0.5 * self.gel_height
        return np.meshgrid(y, z)


@dataclass(frozen=True)
class TactileFrame:
    heightmap: np.ndarray  # (H, W) float32 meters


@dataclass(frozen=True)
class ContactSummary:
    normal_force: float
    contact_pixels: int
    centroid: tuple | None  # (column, row), displacement weighted


def surface_profile(mesh: TriMesh, pose: Pose, sensor: SensorGeom, ys=None, zs=None) -> np.ndarray:
    """x coordinate of the first object surface met along +x behind each pixel.

    Rays start behind every part of the object so the result does not depend
    on how deep the object already sits. Pixels without a hit get +inf.
    """
    if ys is None:
        ys, zs = sensor.pixel_grid()
    verts = pose.apply(mesh.vertices)
    x_start = min(float(verts[:, 0].min()), -sensor.gel_thickness) - 1e-3
    origins = np.column_stack([np.full(ys.size, x_start), ys.ravel(), zs.ravel()])
    inv = pose.inverse()
    t, tri = raycast_many(mesh, inv.apply(origins), inv.rotate(np.array([[1.0, 0.0, 0.0]])))
    return (x_start + t).reshape(ys.shape)


def heightmap_from_profile(profile: np.ndarray, offset: float, sensor: SensorGeom) -> np.ndarray:
    """Displacement when the gel plane sits at ``offset`` along the profile axis."""
    d = np.clip(offset - profile, 0.0, sensor.gel_thickness)
    if sensor.smoothing_sigma > 0:
        from scipy.ndimage import gaussian_filter
        d = np.clip(gaussian_filter(d, sensor.smoothing_sigma, mode="constant"), 0.0, sensor.gel_thickness)
    return d.astype(np.float32)


def render_tactile(mesh: TriMesh, pose: Pose, sensor: SensorGeom) -> TactileFrame:
    """Heightmap for an object whose mesh, placed by ``pose``, is expressed in the sensor frame."""
    return TactileFrame(heightmap_from_profile(surface_profile(mesh, pose, sensor), 0.0, sensor))


def contact_valid(frame: TactileFrame, min_pixels: int = DEFAULT_MIN_PIXELS,
                  min_depth: float = DEFAULT_MIN_DEPTH) -> bool:
    return int(np.count_nonzero(frame.heightmap > min_depth)) >= min_pixels


def normal_force(heightmap: np.ndarray, sensor: SensorGeom) -> float:
    return float(sensor.k_gel * np.sum(heightmap, dtype=np.float64) * sensor.pixel_area)


def contact_force(frame: TactileFrame, sensor: SensorGeom,
                  min_depth: float = DEFAULT_MIN_DEPTH) -> ContactSummary:
    d = frame.heightmap.astype(np.float64)
    total = d.sum()
    pixels = int(np.count_nonzero(d > min_depth))
    if total <= 0:
        return ContactSummary(0.0, pixels, None)
    rows, cols = np.indices(d.shape)
    centroid = (float((cols * d).sum() / total), float((rows * d).sum() / total))
    return ContactSummary(float(sensor.k_gel * total * sensor.pixel_area), pixels, centroid)


def patch_rms_radius(frame: TactileFrame, sensor: SensorGeom,
                     min_depth: float = DEFAULT_MIN_DEPTH) -> float:
    """RMS distance (meters) of contact pixels from their mean position."""
    rows, cols = np.nonzero(frame.heightmap > min_depth)
    if rows.size == 0:
        return 0.0
    var = rows.var() + cols.var()
    return float(np.sqrt(var) * sensor.pitch)


def to_intensity_image(frame: TactileFrame, sensor: SensorGeom) -> np.ndarray:
    """8-bit image: untouched gel is white, full-depth indentation is black."""
    d = frame.heightmap.astype(np.float64) / sensor.gel_thickness
    return (255 - round_half_up(255.0 * d)).clip(0, 255).astype(np.uint8)
