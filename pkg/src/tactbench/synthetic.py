"""A two-primitive corpus whose labels are separable by construction.

A small sphere makes a small tactile patch and a small blob in the camera;
a large cube fills the gel and the image. The label is the thresholded
contact-patch area, so touch separates the classes by construction and
object size separates them for vision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .geometry import Pose, make_primitive
from .sample import GraspPose, Sample
from .scene import SceneConfig, SceneState, render_camera
from .tactile import SensorGeom, contact_force, render_tactile


@dataclass(frozen=True)
class SeparableSpec:
    sphere_radius: float = 0.012
    cube_side: float = 0.05
    press_depth: tuple = (0.0002, 0.0006)
    patch_jitter: tuple = (0.002, 0.004)     # max (y, z) offset of the contact centre on the gel
    placement_half_width: float = 0.05
    area_threshold: int = 1000               # contact pixels; larger patches are labelled 1
    tessellation: int = 24


def _rot_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _press(kind: str, spec: SeparableSpec, rng) -> Pose:
    """Sensor-frame pose pressing the object's nearest face ``d`` deep into the gel."""
    d = rng.uniform(*spec.press_depth)
    jy, jz = spec.patch_jitter
    y, z = rng.uniform(-jy, jy), rng.uniform(-jz, jz)
    if kind == "sphere":
        return Pose.from_matrix(np.eye(3), (spec.sphere_radius - d, y, z))
    return Pose.from_matrix(_rot_x(rng.uniform(0, math.pi / 2)), (spec.cube_side / 2 - d, y, z))


def separable_corpus(n: int, seed: int = 0, spec: SeparableSpec | None = None,
                     sensor: SensorGeom | None = None, scene: SceneConfig | None = None) -> Dataset:
    spec = spec or SeparableSpec()
    sensor = sensor or SensorGeom()
    scene = scene or SceneConfig()
    meshes = {
        "sphere": make_primitive("sphere", (spec.sphere_radius,), spec.tessellation),
        "cube": make_primitive("box", (spec.cube_side,) * 3),
    }
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        kind = "sphere" if rng.random() < 0.5 else "cube"
        mesh = meshes[kind]
        frames = [render_tactile(mesh, _press(kind, spec, rng), sensor) for _ in range(2)]
        forces = [contact_force(f, sensor) for f in frames]
        label = int(min(c.contact_pixels for c in forces) >= spec.area_threshold)

        h = spec.placement_half_width
        x, y, yaw = rng.uniform(-h, h), rng.uniform(-h, h), rng.uniform(0, 2 * math.pi)
        z0 = -float(mesh.vertices[:, 2].min())
        cam = render_camera(SceneState(kind, mesh, Pose.from_yaw(yaw, (x, y, z0))), scene)
        samples.append(Sample(
            object_id=kind, scale=1.0, grasp=GraspPose(x, y, z0, yaw % math.pi),
            tactile_left=frames[0].heightmap.astype(np.float32),
            tactile_right=frames[1].heightmap.astype(np.float32),
            rgb=cam.rgb, depth=cam.depth,
            left_force=forces[0].normal_force, right_force=forces[1].normal_force,
            label=label, attempt_index=i))
    return Dataset(samples, kind="raw", provenance={"source": "separable", "seed": seed, "n": n})

