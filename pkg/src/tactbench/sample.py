from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GraspPose:
    x: float
    y: float
    z: float
    yaw: float

    def __post_init__(self):
        if not self.z > 0:
            raise ValueError("grasp height must be positive")


@dataclass(eq=False)
class Sample:
    """One recorded grasp attempt."""

    object_id: str
    scale: float
    grasp: GraspPose
    tactile_left: np.ndarray   # (H, W) float32
    tactile_right: np.ndarray  # (H, W) float32
    rgb: np.ndarray            # (H, W, 3) uint8
    depth: np.ndarray          # (H, W) float32
    left_force: float
    right_force: float
    label: int
    attempt_index: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        arrays = ("tactile_left", "tactile_right", "rgb", "depth")
        scalars = ("object_id", "scale", "grasp", "left_force", "right_force", "label", "attempt_index")
        return (all(getattr(self, k) == getattr(other, k) for k in scalars)
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        and getattr(self, k).dtype == getattr(other, k).dtype for k in arrays))


MODALITIES = ("vision", "depth", "touch_left", "touch_right")


@dataclass(frozen=True)
class ModalityMask:
    vision: bool = False
    depth: bool = False
    touch_left: bool = False
    touch_right: bool = False

    def __post_init__(self):
        if not self.active:
            raise ValueError("a modality mask needs at least one input")

    @property
    def active(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if getattr(self, m))

    @property
    def name(self) -> str:
        parts = [m for m in ("vision", "depth") if getattr(self, m)]
        if self.touch_left and self.touch_right:
            parts.append("touch_both")
        elif self.touch_left:
            parts.append("touch_left")
        elif self.touch_right:
            parts.append("touch_right")
        return "+".join(parts)

    @classmethod
    def parse(cls, text: str) -> "ModalityMask":
        flags = {}
        for part in text.strip().lower().replace(" ", "").split("+"):
            if part == "touch_both":
                flags["touch_left"] = flags["touch_right"] = True
            elif part in MODALITIES:
                flags[part] = True
            else:
                raise ValueError(f"unknown modality {part!r}")
        return cls(**flags)


# The nine ablation masks, in report order.
ABLATION_MASKS = tuple(ModalityMask.parse(s) for s in (
    "vision+depth+touch_both",
    "vision+touch_left",
    "vision+touch_both",
    "vision",
    "vision+depth",
    "depth+touch_both",
    "depth",
    "touch_both",
    "touch_left",
))
