"""Top-down grasp selection, force-limited closing and stick-slip lift labeling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import MassProperties, Pose, TriMesh, mass_properties
from .sample import GraspPose, Sample
from .scene import (SceneConfig, SceneState, place_object, render_camera,
                    render_topdown_depth, topdown_pixel_centers)
from .tactile import (SensorGeom, TactileFrame, contact_force, contact_valid,
                      heightmap_from_profile, normal_force, patch_rms_radius, surface_profile)

YAW_BINS = 18
_OBJECT_EPS = 1e-6


class NoGraspFound(Exception):
    pass


class NoContact(Exception):
    pass


@dataclass(frozen=True)
class Gripper:
    max_width: float = 0.085
    close_step: float = 0.0002
    force_threshold: float = 2.0
    sensor: SensorGeom = field(default_factory=SensorGeom)
    num_candidates: int = 64

    def __post_init__(self):
        if not (self.max_width > 0 and self.close_step > 0 and self.force_threshold > 0):
            raise ValueError("gripper width, step and force threshold must be positive")


@dataclass(frozen=True)
class LiftParams:
    speed: float = 0.1
    duration: float = 1.5
    mu_s: float = 0.6
    mu_k: float = 0.5
    gravity: float = 9.81
    success_fraction: float = 0.8
    torque_gate: bool = True

    def __post_init__(self):
        if not (0 < self.mu_k <= self.mu_s):
            raise ValueError("friction must satisfy 0 < mu_k <= mu_s")
        if not (self.speed > 0 and self.duration > 0):
            raise ValueError("lift speed and duration must be positive")

    @property
    def target(self) -> float:
        return self.speed * self.duration


@dataclass(frozen=True)
class GraspOutcome:
    success: bool
    valid: bool
    left_force: float
    right_force: float
    final_object_rise: float
    lift_target: float
    torque_slip: bool = False


@dataclass(frozen=True)
class LiftResult:
    final_object_rise: float
    success: bool


@dataclass(frozen=True)
class ClosingResult:
    left: TactileFrame
    right: TactileFrame
    width: float
    left_force: float
    right_force: float


# ---------------------------------------------------------------------------
# Grasp selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateScores:
    rows: np.ndarray
    cols: np.ndarray
    yaw_index: np.ndarray
    width: np.ndarray        # meters; inf when the run leaves the search window
    antipodality: np.ndarray
    score: np.ndarray
    fits: np.ndarray
    center_rc: np.ndarray    # (K, 2) fractional pixel coordinates of the chord midpoint


def object_mask(depth: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    return depth < cfg.topdown_height - _OBJECT_EPS


def sample_candidates(depth: np.ndarray, cfg: SceneConfig, k: int, rng: np.random.Generator):
    rows, cols = np.nonzero(object_mask(depth, cfg))
    if rows.size == 0:
        raise NoGraspFound("depth image has no object pixels")
    pick = rng.integers(0, rows.size, size=k)
    yaw_idx = rng.integers(0, YAW_BINS, size=k)
    return rows[pick], cols[pick], yaw_idx


def score_candidates(depth, cfg: SceneConfig, gripper: Gripper, rows, cols, yaw_idx) -> CandidateScores:
    """Antipodality times width fit for each (pixel, yaw) candidate.

    The object width is its extent along the closing direction inside the
    band swept by the pads (one lane per pixel across the pad width), so a
    chord that only clips a corner is not mistaken for a thin part. The
    extreme pixels of the candidate's own lane are the contacts whose
    normals give the antipodality.
    """
    px, py = cfg.topdown_pitch
    if abs(px - py) > 1e-12:
        raise ValueError("grasp scoring needs square top-down pixels")
    mask = object_mask(depth, cfg)
    height = np.where(mask, cfg.topdown_height - depth, 0.0)
    gy, gx = np.gradient(height)
    nr, nc = mask.shape

    rows = np.asarray(rows)
    cols = np.asarray(cols)
    yaw = np.asarray(yaw_idx) * (math.pi / YAW_BINS)
    ux, uy = np.cos(yaw), np.sin(yaw)
    limit = int(gripper.max_width / px) + 2
    s = np.arange(-limit, limit + 1, dtype=float)
    half = int(math.floor(0.5 * gripper.sensor.gel_width / px + 1e-9))
    lanes = np.arange(-half, half + 1, dtype=float)

    # (K, lanes, steps) pixel coordinates of the band
    rr = np.rint(rows[:, None, None] + s[None, None] * uy[:, None, None]
                 + lanes[None, :, None] * ux[:, None, None]).astype(np.int64)
    cc = np.rint(cols[:, None, None] + s[None, None] * ux[:, None, None]
                 - lanes[None, :, None] * uy[:, None, None]).astype(np.int64)
    inside = (rr >= 0) & (rr < nr) & (cc >= 0) & (cc < nc)
    inside &= mask[rr.clip(0, nr - 1), cc.clip(0, nc - 1)]

    def extremes(occ):
        hi = np.where(occ, s[None], -np.inf).max(axis=1)
        lo = np.where(occ, s[None], np.inf).min(axis=1)
        return hi, lo

    s_hi, s_lo = extremes(inside.any(axis=1))
    c_hi, c_lo = extremes(inside[:, half, :])
    bounded = (s_hi < limit) & (s_lo > -limit)
    width = np.where(bounded, (s_hi - s_lo + 1) * px, np.inf)
    fits = width < gripper.max_width

    def outward_normal(step):
        r = np.rint(rows + step * uy).astype(np.int64).clip(0, nr - 1)
        c = np.rint(cols + step * ux).astype(np.int64).clip(0, nc - 1)
        g = np.stack([gx[r, c], gy[r, c]], axis=1)
        norm = np.linalg.norm(g, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(norm[:, None] > 0, -g / norm[:, None], 0.0)

    a = np.stack([ux, uy], axis=1)
    n_left = outward_normal(c_lo)
    n_right = outward_normal(c_hi)
    antip = 0.5 * (-(n_left * a).sum(axis=1) + (n_right * a).sum(axis=1))
    width_fit = np.where(fits, 1.0 - width / gripper.max_width, 0.0)
    score = np.where(fits, antip * width_fit, 0.0)
    mid = np.where(bounded, 0.5 * (s_hi + s_lo), 0.0)
    center = np.stack([rows + mid * uy, cols + mid * ux], axis=1)
    return CandidateScores(rows, cols, np.asarray(yaw_idx), width, antip, score, fits, center)


def select_grasp(topdown_depth: np.ndarray, gripper: Gripper, num_candidates: int,
                 rng: np.random.Generator, cfg: SceneConfig) -> GraspPose:
    rows, cols, yaw_idx = sample_candidates(topdown_depth, cfg, num_candidates, rng)
    sc = score_candidates(topdown_depth, cfg, gripper, rows, cols, yaw_idx)
    if not np.any(sc.fits):
        raise NoGraspFound("no sampled candidate fits between the fingers")
    # ties go to the lowest candidate index
    best = int(np.argmax(np.where(sc.fits, sc.score, -np.inf)))
    return grasp_from_candidate(topdown_depth, cfg, gripper, sc, best)


def grasp_from_candidate(depth, cfg: SceneConfig, gripper: Gripper, sc: CandidateScores, i: int) -> GraspPose:
    px, py = cfg.topdown_pitch
    x0, y0 = cfg.workspace[0], cfg.workspace[1]
    r_c, c_c = sc.center_rc[i]
    top = cfg.topdown_height - float(depth[sc.rows[i], sc.cols[i]])
    half_pad = 0.5 * gripper.sensor.gel_height
    z = max(top - half_pad, half_pad)
    return GraspPose(float(x0 + (c_c + 0.5) * px), float(y0 + (r_c + 0.5) * py), float(z),
                     float(sc.yaw_index[i] * math.pi / YAW_BINS))


# ---------------------------------------------------------------------------
# Closing
# ---------------------------------------------------------------------------

def gripper_pose(grasp: GraspPose) -> Pose:
    return Pose.from_yaw(grasp.yaw, (grasp.x, grasp.y, grasp.z))


def finger_sensor_pose(grasp: GraspPose, width: float, side: str) -> Pose:
    """World pose of a finger's sensor frame at opening ``width``."""
    g = gripper_pose(grasp)
    if side == "left":
        local = Pose(translation=(-0.5 * width, 0.0, 0.0))
    else:
        local = Pose.from_yaw(math.pi, (0.5 * width, 0.0, 0.0))
    return g.compose(local)


@dataclass(frozen=True)
class ClosingSweep:
    widths: np.ndarray
    left_force: np.ndarray
    right_force: np.ndarray
    left_profile: np.ndarray
    right_profile: np.ndarray


def closing_sweep(scene: SceneState, grasp: GraspPose, gripper: Gripper) -> ClosingSweep:
    """Per-finger forces at every closing step from max_width down to zero.

    Each finger's surface profile is cast once with the gel at the gripper
    center; at opening w the gel plane sits w/2 further out, so every step is
    an exact shift of the same profile rather than a fresh render.
    """
    sensor = gripper.sensor
    n = int(math.floor(gripper.max_width / gripper.close_step + 1e-9))
    widths = gripper.max_width - gripper.close_step * np.arange(n + 1)
    widths[-1] = max(widths[-1], 0.0)
    profiles = []
    for side in ("left", "right"):
        to_sensor = finger_sensor_pose(grasp, 0.0, side).inverse().compose(scene.pose)
        profiles.append(surface_profile(scene.mesh, to_sensor, sensor))
    forces = []
    for prof in profiles:
        offs = -0.5 * widths
        d = np.clip(offs[:, None, None] - prof[None], 0.0, sensor.gel_thickness)
        if sensor.smoothing_sigma > 0:
            d = np.stack([heightmap_from_profile(prof, o, sensor) for o in offs])
        d = d.astype(np.float32)
        forces.append(sensor.k_gel * d.sum(axis=(1, 2), dtype=np.float64) * sensor.pixel_area)
    return ClosingSweep(widths, forces[0], forces[1], profiles[0], profiles[1])


def close_gripper(scene: SceneState, grasp: GraspPose, gripper: Gripper) -> ClosingResult:
    sw = closing_sweep(scene, grasp, gripper)
    if sw.left_force[0] > 0 or sw.right_force[0] > 0:
        raise NoContact("fingers already overlap the object at full opening")
    ok = np.minimum(sw.left_force, sw.right_force) >= gripper.force_threshold
    if not np.any(ok):
        raise NoContact("closed fully without reaching the force threshold on both fingers")
    k = int(np.argmax(ok))
    w = float(sw.widths[k])
    sensor = gripper.sensor
    left = TactileFrame(heightmap_from_profile(sw.left_profile, -0.5 * w, sensor))
    right = TactileFrame(heightmap_from_profile(sw.right_profile, -0.5 * w, sensor))
    return ClosingResult(left, right, w, normal_force(left.heightmap, sensor),
                         normal_force(right.heightmap, sensor))


# ---------------------------------------------------------------------------
# Lift
# ---------------------------------------------------------------------------

def lift_object(left_force: float, right_force: float, mass: float, lp: LiftParams) -> LiftResult:
    """Quasi-static vertical stick-slip lift, solved piecewise in closed form.

    The object starts moving with the fingers. If static friction cannot
    carry its weight it slides with constant acceleration
    (mu_k * F_n - m g) / m until it is back on the table or time runs out.
    """
    if left_force < 0 or right_force < 0 or not mass > 0:
        raise ValueError("forces must be non-negative and mass positive")
    fn = left_force + right_force
    weight = mass * lp.gravity
    v, T = lp.speed, lp.duration
    if lp.mu_s * fn >= weight:
        rise = v * T
    else:
        a = (lp.mu_k * fn - weight) / mass
        if a >= 0:
            # object speed is capped at the finger speed
            rise = v * T
        else:
            t_land = -2.0 * v / a
            rise = 0.0 if t_land <= T else v * T + 0.5 * a * T * T
    rise = min(max(rise, 0.0), v * T)
    return LiftResult(rise, rise >= lp.success_fraction * v * T)


def lift_trajectory(left_force: float, right_force: float, mass: float, lp: LiftParams,
                    dt: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step integration of the same model; returns (times, object heights)."""
    fn = left_force + right_force
    weight = mass * lp.gravity
    v = lp.speed
    if lp.mu_s * fn >= weight:
        acc = 0.0
    else:
        acc = min((lp.mu_k * fn - weight) / mass, 0.0)
    steps = int(math.ceil(lp.duration / dt - 1e-9))
    z, vz = 0.0, v
    zs = [0.0]
    for i in range(steps):
        h = min(dt, lp.duration - i * dt)
        z += vz * h + 0.5 * acc * h * h
        vz += acc * h
        if z <= 0.0:
            # back on the table; kinetic friction cannot lift it again
            z, vz, acc = 0.0, 0.0, 0.0
        zs.append(z)
    t = np.minimum(np.arange(steps + 1) * dt, lp.duration)
    return t, np.array(zs)


# ---------------------------------------------------------------------------
# Full attempt
# ---------------------------------------------------------------------------

REASONS = ("no_grasp", "no_contact", "invalid_tactile")


@dataclass
class AttemptResult:
    sample: Sample | None
    reason: str  # "ok" or one of REASONS
    outcome: GraspOutcome | None = None


def _contact_point_world(frame: TactileFrame, sensor: SensorGeom, pose: Pose):
    s = contact_force(frame, sensor)
    if s.centroid is None:
        return None
    col, row = s.centroid
    y = (col + 0.5) * sensor.pitch - 0.5 * sensor.gel_width
    z = (row + 0.5) * sensor.pitch - 0.5 * sensor.gel_height
    return pose.apply(np.array([0.0, y, z]))


def torque_slips(closing: ClosingResult, grasp: GraspPose, gripper: Gripper,
                 com_world: np.ndarray, mass: float, lp: LiftParams) -> bool:
    """True when gravity about the contact centroid beats the frictional torque capacity."""
    sensor = gripper.sensor
    pts = [_contact_point_world(closing.left, sensor, finger_sensor_pose(grasp, closing.width, "left")),
           _contact_point_world(closing.right, sensor, finger_sensor_pose(grasp, closing.width, "right"))]
    pts = [p for p in pts if p is not None]
    if not pts:
        return True
    c = np.mean(pts, axis=0)
    offset = float(np.hypot(com_world[0] - c[0], com_world[1] - c[1]))
    r_patch = 0.5 * (patch_rms_radius(closing.left, sensor) + patch_rms_radius(closing.right, sensor))
    fn = closing.left_force + closing.right_force
    return offset * mass * lp.gravity > lp.mu_s * fn * r_patch


def execute_attempt(mesh: TriMesh, cfg: SceneConfig, gripper: Gripper, lp: LiftParams,
                    rng: np.random.Generator, *, object_id: str = "object", attempt_index: int = 0,
                    scale: float = 1.0, density: float = 500.0,
                    mass_props: MassProperties | None = None,
                    render_views: bool = True) -> AttemptResult:
    """place -> top-down render -> select -> close -> validity gate -> lift.

    Per-attempt failures come back as a reason string; only configuration
    problems (e.g. an object larger than the workspace) raise.
    """
    if mass_props is None:
        mass_props = mass_properties(mesh, density)
    pose = place_object(mesh, cfg, rng)
    scene = SceneState(object_id, mesh, pose)
    depth = render_topdown_depth(scene, cfg)
    try:
        grasp = select_grasp(depth, gripper, gripper.num_candidates, rng, cfg)
    except NoGraspFound:
        return AttemptResult(None, "no_grasp")
    try:
        closing = close_gripper(scene, grasp, gripper)
    except NoContact:
        return AttemptResult(None, "no_contact")
    valid = contact_valid(closing.left) and contact_valid(closing.right)
    if not valid:
        outcome = GraspOutcome(False, False, closing.left_force, closing.right_force, 0.0, lp.target)
        return AttemptResult(None, "invalid_tactile", outcome)

    lift = lift_object(closing.left_force, closing.right_force, mass_props.mass, lp)
    rise, success, slipped = lift.final_object_rise, lift.success, False
    if lp.torque_gate and success:
        com = pose.apply(mass_props.center_of_mass)
        if torque_slips(closing, grasp, gripper, com, mass_props.mass, lp):
            rise, success, slipped = 0.0, False, True
    outcome = GraspOutcome(success, True, closing.left_force, closing.right_force, rise, lp.target, slipped)

    if render_views:
        frame = render_camera(scene, cfg)
        rgb, cam_depth = frame.rgb, frame.depth
    else:
        cam = cfg.camera
        rgb = np.zeros((cam.height, cam.width, 3), dtype=np.uint8)
        cam_depth = np.full((cam.height, cam.width), cfg.far, dtype=np.float32)
    sample = Sample(object_id, float(scale), grasp, closing.left.heightmap, closing.right.heightmap,
                    rgb, cam_depth, float(closing.left_force), float(closing.right_force),
                    int(success), int(attempt_index))
    return AttemptResult(sample, "ok", outcome)
