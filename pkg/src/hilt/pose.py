"""Gripper pose type shared across the simulator, controller, and policies.

A pose is 7 numbers: translation (x, y, z) in meters, rotation as extrinsic
XYZ Euler angles in radians, and a gripper open fraction in [0, 1] where
1.0 is fully open and 0.0 is closed.  The same container doubles as an
action: translation and rotation are then deltas added to the current pose
and the gripper field is the commanded absolute open fraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRIPPER_OPEN = 1.0
GRIPPER_CLOSED = 0.0


@dataclass
class Pose7:
    pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gripper: float = GRIPPER_OPEN

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(3).copy()
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(3).copy()
        self.gripper = float(self.gripper)

    def to_array(self) -> np.ndarray:
        """Pack into a flat (7,) float64 vector [pos, rot, gripper]."""
        out = np.empty(7)
        out[0:3] = self.pos
        out[3:6] = self.rot
        out[6] = self.gripper
        return out

    @classmethod
    def from_array(cls, a) -> "Pose7":
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return cls(pos=a[0:3], rot=a[3:6], gripper=a[6])

    def copy(self) -> "Pose7":
        return Pose7(pos=self.pos, rot=self.rot, gripper=self.gripper)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose7):
            return NotImplemented
        return (
            np.array_equal(self.pos, other.pos)
            and np.array_equal(self.rot, other.rot)
            and self.gripper == other.gripper
        )


def euler_to_matrix(rot) -> np.ndarray:
    """Rotation matrix for extrinsic XYZ Euler angles.

    Extrinsic XYZ means rotate about the fixed x axis first, then fixed y,
    then fixed z, so the composed matrix is Rz @ Ry @ Rx.
    """
    rx, ry, rz = np.asarray(rot, dtype=np.float64).reshape(3)
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def pose_delta(current: Pose7, target: Pose7) -> np.ndarray:
    """Componentwise target minus current over the 6 pose dims (no gripper)."""
    out = np.empty(6)
    out[0:3] = target.pos - current.pos
    out[3:6] = target.rot - current.rot
    return out


def apply_delta(pose: Pose7, delta, gripper: float | None = None) -> Pose7:
    """New pose with a 6-dim delta added; gripper replaced when given."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    g = pose.gripper if gripper is None else float(gripper)
    return Pose7(pos=pose.pos + delta[0:3], rot=pose.rot + delta[3:6], gripper=g)
