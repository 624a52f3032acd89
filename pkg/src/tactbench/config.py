"""Flat ``key = value`` configuration with typed keys and a canonical hash."""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass

from . import __version__
from .dataset import SimSettings
from .geometry import TriMesh, load_mesh, make_primitive
from .grasping import Gripper, LiftParams
from .learn.model import ModelConfig
from .learn.train import TrainConfig
from .sample import ABLATION_MASKS, ModalityMask
from .scene import CameraConfig, SceneConfig, default_camera_pose
from .tactile import SensorGeom


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _masks(text):
    masks = tuple(ModalityMask.parse(v) for v in text.split(",") if v.strip())
    if not masks:
        raise ValueError("at least one mask is required")
    return masks


def _text(text):
    return text.strip()


def _format(value) -> str:
    if isinstance(value, ModalityMask):
        return value.name
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(v.name if isinstance(v, ModalityMask) else _format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    doc: str


DEFAULT_CORPUS = ("box_tall=box:0.09,0.07,0.25;cylinder=cylinder:0.045,0.22;box_flat=box:0.1,0.07,0.05;"
                  "sphere=sphere:0.05;capsule=capsule:0.04,0.12;l_block=l_block:0.12,0.08,0.1,0.04")

KEYS = [
    Key("seed", int, 0, "master seed for every random stream"),
    Key("workers", int, 0, "worker processes; 0 means one per logical core"),
    Key("sensor.gel_width", float, 0.016, "gel width in meters (image columns)"),
    Key("sensor.gel_height", float, 0.024, "gel height in meters (image rows)"),
    Key("sensor.gel_thickness", float, 0.002, "gel thickness in meters; displacement saturates here"),
    Key("sensor.res_w", int, 40, "tactile image width in pixels"),
    Key("sensor.res_h", int, 60, "tactile image height in pixels"),
    Key("sensor.k_gel", float, 4e7, "gel stiffness in N/m^3 (pressure per unit indentation)"),
    Key("sensor.smoothing_sigma", float, 0.0, "optional Gaussian blur of the heightmap in pixels"),
    Key("gripper.max_width", float, 0.085, "full opening of the parallel jaw in meters"),
    Key("gripper.close_step", float, 0.0002, "width decrement per closing step in meters"),
    Key("gripper.force_threshold", float, 2.0, "per-finger normal force that stops closing, N"),
    Key("gripper.num_candidates", int, 64, "grasp candidates scored per attempt"),
    Key("lift.speed", float, 0.1, "lift speed in m/s"),
    Key("lift.duration", float, 1.5, "lift duration in s"),
    Key("lift.mu_s", float, 0.6, "static friction coefficient"),
    Key("lift.mu_k", float, 0.5, "kinetic friction coefficient"),
    Key("lift.gravity", float, 9.81, "gravity in m/s^2"),
    Key("lift.success_fraction", float, 0.8, "fraction of the commanded rise that counts as success"),
    Key("lift.torque_gate", _bool, True, "fail grasps whose off-centre torque exceeds the friction torque"),
    Key("scene.workspace", _floats, (-0.15, -0.15, 0.15, 0.15), "placement rectangle xmin,ymin,xmax,ymax in meters"),
    Key("scene.camera_res", _ints, (64, 64), "side camera width,height in pixels"),
    Key("scene.camera_fov", float, 45.0, "side camera vertical field of view in degrees"),
    Key("scene.camera_elevation", float, 45.0, "side camera elevation in degrees"),
    Key("scene.camera_distance", float, 0.45, "side camera distance from the workspace centre in meters"),
    Key("scene.topdown_res", _ints, (96, 96), "top-down depth map columns,rows"),
    Key("scene.topdown_height", float, 0.5, "top-down camera height in meters"),
    Key("scene.far", float, 2.0, "depth value for pixels that miss the object, meters"),
    Key("scene.light", _floats, (0.3, -0.4, 0.866), "light direction (normalized on load)"),
    Key("object.density", float, 500.0, "object density in kg/m^3"),
    Key("corpus.objects", _text, DEFAULT_CORPUS,
        "objects as id=kind:dims separated by ';' (kinds box, cylinder, sphere, capsule, l_block) "
        "or id=path/to/mesh.tri"),
    Key("corpus.tessellation", int, 32, "segments for curved primitives"),
    Key("corpus.scale", float, 0.8, "scale of every object when collect runs without a selection file"),
    Key("selection.scales", _floats, (0.6, 0.7, 0.8, 0.9), "candidate scales tried per object"),
    Key("selection.attempts_stage1", int, 100, "grasps per object and scale in the success screen"),
    Key("selection.attempts_stage2", int, 150, "grasps in the tactile validity screen"),
    Key("selection.min_success", float, 0.25, "success rate a scale must exceed"),
    Key("selection.unknown_min_valid", int, 500, "projected valid attempts below which an object is held out"),
    Key("selection.collect_attempts_per_object", int, 2500, "attempt count used for that projection"),
    Key("dataset.n_target", int, 2000, "valid samples to collect"),
    Key("dataset.budget_factor", int, 50, "attempt budget per needed sample per object"),
    Key("dataset.cap", int, 500, "per-object cap applied by the balancing filter"),
    Key("split.test_fraction", float, 0.2, "held-out test fraction"),
    Key("split.folds", int, 3, "cross-validation folds"),
    Key("train.epochs", int, 10, "training epochs"),
    Key("train.batch_size", int, 32, "mini-batch size"),
    Key("train.lr", float, 0.01, "learning rate"),
    Key("train.momentum", float, 0.9, "momentum for sgd_momentum"),
    Key("train.optimizer", _text, "sgd_momentum", "sgd_momentum or adam"),
    Key("train.input_res", int, 64, "encoder input resolution (square)"),
    Key("train.widths", _ints, (8, 16, 32), "channel width of each residual stage"),
    Key("train.blocks", int, 2, "residual blocks per stage"),
    Key("train.hidden", _ints, (32,), "hidden widths of the fusion head"),
    Key("train.mask", ModalityMask.parse, ModalityMask.parse("vision+depth+touch_both"), "mask used by `train`"),
    Key("ablation.masks", _masks, ABLATION_MASKS, "masks swept by `ablate`, comma separated"),
    Key("ablation.sizes", _ints, (250, 500, 1000, 2000), "sample sizes swept by `ablate`"),
]
KEY_INDEX = {k.name: k for k in KEYS}


class Config:
    def __init__(self, values: dict | None = None):
        self.values = {k.name: k.default for k in KEYS}
        for name, value in (values or {}).items():
            self[name] = value

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, value):
        if name not in KEY_INDEX:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(value, str):
            try:
                value = KEY_INDEX[name].parse(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {name}: {exc}") from None
        self.values[name] = value

    def canonical_text(self) -> str:
        """Sorted ``key = value`` lines. The worker count is left out: no output depends on it."""
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values) if k != "workers")

    @property
    def hash(self) -> str:
        return f"{zlib.crc32(self.canonical_text().encode('utf-8')):08x}"

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self["seed"], "version": __version__}

    def provenance_line(self) -> str:
        p = self.provenance()
        return f"config_hash={p['config_hash']} seed={p['seed']} version={p['version']}"

    # -- builders ---------------------------------------------------------

    def sensor(self) -> SensorGeom:
        return SensorGeom(self["sensor.gel_width"], self["sensor.gel_height"], self["sensor.gel_thickness"],
                          (self["sensor.res_w"], self["sensor.res_h"]), self["sensor.k_gel"],
                          smoothing_sigma=self["sensor.smoothing_sigma"])

    def scene(self) -> SceneConfig:
        w, h = self["scene.camera_res"]
        cam = CameraConfig(w, h, self["scene.camera_fov"],
                           default_camera_pose(self["scene.camera_elevation"], self["scene.camera_distance"]))
        return SceneConfig(tuple(self["scene.workspace"]), cam, tuple(self["scene.topdown_res"]),
                           self["scene.topdown_height"], self["scene.far"], tuple(self["scene.light"]),
                           self["seed"])

    def gripper(self) -> Gripper:
        return Gripper(self["gripper.max_width"], self["gripper.close_step"], self["gripper.force_threshold"],
                       self.sensor(), self["gripper.num_candidates"])

    def lift(self) -> LiftParams:
        return LiftParams(self["lift.speed"], self["lift.duration"], self["lift.mu_s"], self["lift.mu_k"],
                          self["lift.gravity"], self["lift.success_fraction"], self["lift.torque_gate"])

    def sim_settings(self) -> SimSettings:
        return SimSettings(self.scene(), self.gripper(), self.lift(), self["object.density"], self["seed"])

    def model_config(self, mask: ModalityMask | None = None) -> ModelConfig:
        return ModelConfig(mask or self["train.mask"], self["train.input_res"], tuple(self["train.widths"]),
                           self["train.blocks"], tuple(self["train.hidden"]), self["seed"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(self["train.epochs"], self["train.batch_size"], self["train.lr"],
                           self["train.optimizer"], self["train.momentum"], self["split.folds"],
                           self["split.test_fraction"], self["seed"])

    def workers(self) -> int:
        return self["workers"] or (os.cpu_count() or 1)

    def corpus(self, base_dir: str | os.PathLike = ".") -> list[tuple[str, TriMesh]]:
        return parse_corpus(self["corpus.objects"], self["corpus.tessellation"], base_dir)


def parse_corpus(text: str, tessellation: int = 32, base_dir=".") -> list[tuple[str, TriMesh]]:
    out, seen = [], set()
    for entry in text.split(";"):
        entry = entry.strip()
        if not entry:
            continue
        oid, sep, rhs = entry.partition("=")
        oid, rhs = oid.strip(), rhs.strip()
        if not sep or not oid or not rhs:
            raise ConfigError(f"bad corpus entry {entry!r}")
        if oid in seen:
            raise ConfigError(f"duplicate object id {oid!r}")
        seen.add(oid)
        kind, colon, dims = rhs.partition(":")
        if colon and kind in ("box", "cylinder", "sphere", "capsule", "l_block"):
            mesh = make_primitive(kind, _floats(dims), tessellation)
        else:
            mesh = load_mesh(os.path.join(base_dir, rhs))
        out.append((oid, mesh))
    if not out:
        raise ConfigError("corpus is empty")
    return out


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key not in KEY_INDEX:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def load_config(path=None, overrides: dict | None = None) -> Config:
    cfg = Config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for k, v in parse_config_text(fh.read()).items():
                cfg[k] = v
    for k, v in (overrides or {}).items():
        cfg[k] = v
    return cfg


def key_table() -> str:
    """One line per key with its default and description."""
    width = max(len(k.name) for k in KEYS)
    return "\n".join(f"  {k.name:<{width}}  default {_format(k.default)}  {k.doc}" for k in KEYS)
