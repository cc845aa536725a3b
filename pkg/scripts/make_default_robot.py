#!/usr/bin/env python3
"""Regenerate src/alcove/data/panda7.json.

Builds the default 7-DOF arm from published Franka-style modified-DH
offsets and joint limits, attaches capsule collision geometry spanning
consecutive joint origins, and writes the model JSON. The palm capsule
stops short of the grasp center so a closed gripper does not collide with
the object it is grasping.
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from alcove import transforms
from alcove.kinematics import Capsule, RobotModel, save_robot

# (alpha_{i-1}, a_{i-1}, d_i) per joint, radians/meters
DH = [
    (0.0, 0.0, 0.333),
    (-np.pi / 2, 0.0, 0.0),
    (np.pi / 2, 0.0, 0.316),
    (np.pi / 2, 0.0825, 0.0),
    (-np.pi / 2, -0.0825, 0.384),
    (np.pi / 2, 0.0, 0.0),
    (np.pi / 2, 0.088, 0.0),
]

LIMITS = [
    (-2.8973, 2.8973),
    (-1.7628, 1.7628),
    (-2.8973, 2.8973),
    (-3.0718, -0.0698),
    (-2.8973, 2.8973),
    (-0.0175, 3.7525),
    (-2.8973, 2.8973),
]

ARM_RADIUS = 0.055
WRIST_RADIUS = 0.05


def dh_origin(alpha: float, a: float, d: float) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = transforms.axis_angle_matrix(np.array([1.0, 0.0, 0.0]), alpha)
    T[:3, 3] = T[:3, :3] @ np.array([a, 0.0, d])
    return T


def main() -> None:
    origins = [dh_origin(*row) for row in DH]
    axes = [[0.0, 0.0, 1.0]] * 7

    # flange at 0.107 past joint 7, hand/TCP a further 0.103 along z
    gripper_offset = dh_origin(0.0, 0.0, 0.107)
    gripper_offset[:3, :3] = transforms.axis_angle_matrix(
        np.array([0.0, 0.0, 1.0]), -np.pi / 4)
    gripper_offset = gripper_offset @ dh_origin(0.0, 0.0, 0.103)

    camera_offset = np.eye(4)
    camera_offset[:3, 3] = [0.05, 0.0, 0.06]

    capsules: list[list[Capsule]] = []
    for i in range(7):
        if i < 6:
            nxt = origins[i + 1][:3, 3]
        else:
            nxt = np.array([0.0, 0.0, 0.16])  # palm; grasp center is at 0.21
        segs = [Capsule(np.zeros(3), nxt, WRIST_RADIUS if i >= 4 else ARM_RADIUS)]
        if i == 0:
            # pedestal column; stops 0.1 above the mounting surface so the
            # mount contact itself does not read as a collision
            segs.append(Capsule(np.array([0.0, 0.0, -0.233]), np.zeros(3), 0.07))
        capsules.append(segs)

    model = RobotModel(axes, origins, LIMITS, camera_offset, gripper_offset,
                       split := 4, capsules)
    out = Path(__file__).resolve().parents[1] / "src" / "alcove" / "data" / "panda7.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_robot(model, out)
    print(f"wrote {out} (split={split})")


if __name__ == "__main__":
    main()
