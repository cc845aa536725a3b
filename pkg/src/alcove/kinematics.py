"""Serial-chain manipulator model: forward kinematics, Jacobian,
manipulability, damped-least-squares IK, joint-space metric, and the
capsule collision geometry of the links.

Joint i applies a fixed preceding transform followed by a rotation about a
unit axis in its local frame. A configuration is a plain float ndarray of
length ``model.dof``.
"""

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import _kernels, transforms
from .config import IkConfig


class KinematicsError(ValueError):
    """Bad input: dimension mismatch or malformed model."""


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float


@dataclass(frozen=True)
class Viewpoint:
    """Camera pose: position plus orthonormal rotation; the viewing axis is
    the rotation's z column."""
    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise KinematicsError("viewpoint rotation must be orthonormal, det +1")

    @property
    def viewing_axis(self) -> np.ndarray:
        return self.rotation[:, 2]

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Viewpoint":
        return Viewpoint(T[:3, 3].copy(), T[:3, :3].copy())


class RobotModel:
    """Immutable revolute chain with camera/gripper offsets and per-link
    capsule collision geometry."""

    def __init__(self, axes, origins, limits, camera_offset, gripper_offset,
                 body_wrist_split, link_capsules, strict: bool = True):
        self.axes = np.asarray(axes, dtype=float)
        self.origins = np.asarray(origins, dtype=float)
        self.limits = np.asarray(limits, dtype=float)
        self.camera_offset = np.asarray(camera_offset, dtype=float)
        self.gripper_offset = np.asarray(gripper_offset, dtype=float)
        self.body_wrist_split = int(body_wrist_split)
        self.link_capsules = [
            [Capsule(np.asarray(c.a, float), np.asarray(c.b, float), float(c.radius))
             for c in link] for link in link_capsules]
        self._validate(strict)
        self.axes.setflags(write=False)
        self.origins.setflags(write=False)
        self.limits.setflags(write=False)

    @property
    def dof(self) -> int:
        return self.axes.shape[0]

    def _validate(self, strict: bool):
        d = self.dof
        if strict and d < 6:
            raise KinematicsError(f"model has {d} joints, need at least 6")
        if not 0 < self.body_wrist_split < d:
            raise KinematicsError("body/wrist split must lie strictly inside the chain")
        if self.origins.shape != (d, 4, 4) or self.limits.shape != (d, 2):
            raise KinematicsError("inconsistent joint array shapes")
        norms = np.linalg.norm(self.axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise KinematicsError("joint axes must be unit vectors")
        if np.any(self.limits[:, 0] >= self.limits[:, 1]):
            raise KinematicsError("each joint needs lower < upper limit")
        if len(self.link_capsules) != d:
            raise KinematicsError("need one capsule list per link")

    def check_config(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.dof,):
            raise KinematicsError(f"config has shape {q.shape}, expected ({self.dof},)")
        return q

    def within_limits(self, q, tol: float = 1e-9) -> bool:
        q = self.check_config(q)
        return bool(np.all(q >= self.limits[:, 0] - tol)
                    and np.all(q <= self.limits[:, 1] + tol))

    def random_config(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.limits[:, 0], self.limits[:, 1])


@dataclass(frozen=True)
class FkResult:
    link_transforms: np.ndarray  # (d, 4, 4)
    camera: Viewpoint
    ee_pose: np.ndarray          # (4, 4)


def forward_kinematics(model: RobotModel, q) -> FkResult:
    q = model.check_config(q)
    tfs = _kernels.chain_transforms(model.origins, model.axes, q)
    last = tfs[-1]
    cam = last @ model.camera_offset
    ee = last @ model.gripper_offset
    return FkResult(tfs, Viewpoint.from_matrix(cam), ee)


def camera_viewpoint(model: RobotModel, q) -> Viewpoint:
    return forward_kinematics(model, q).camera


def jacobian(model: RobotModel, q) -> np.ndarray:
    """Geometric Jacobian (6 x d) at the end-effector origin: linear rows
    in m/rad on top, angular rows in rad/rad below."""
    q = model.check_config(q)
    tfs = _kernels.chain_transforms(model.origins, model.axes, q)
    ee = tfs[-1] @ model.gripper_offset
    return _kernels.geometric_jacobian(tfs, model.axes, ee[:3, 3])


def manipulability(model: RobotModel, q, rank_tol: float = 1e-8) -> float:
    """Yoshikawa index sqrt(det(J J^T)) of the full 6xd Jacobian.

    Models with fewer than 6 joints (test chains) fall back to the
    positional rows and the Gram determinant, which reduces to |det J| for
    planar 2-link chains. Rank deficiency below rank_tol returns exactly 0.
    """
    J = jacobian(model, q)
    if model.dof < 6:
        J = J[:3, :]
    sv = np.linalg.svd(J, compute_uv=False)
    if sv.shape[0] > min(J.shape):
        sv = sv[:min(J.shape)]
    if np.any(sv < rank_tol):
        return 0.0
    m = float(np.prod(sv))
    return m if m > 1e-12 else 0.0


def joint_distance(a, b) -> float:
    """Euclidean joint-space distance (radians)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise KinematicsError(f"config shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(b - a))


def inverse_kinematics(model: RobotModel, target: np.ndarray, seed,
                       params: IkConfig | None = None,
                       frame: str = "gripper") -> np.ndarray | None:
    """Damped-least-squares IK from a seed configuration.

    `frame` selects which offset frame must reach `target` ("gripper" or
    "camera"). Returns the configuration, or None when no solution within
    tolerance exists inside the joint limits (infeasible, not an error).
    """
    seed = model.check_config(seed)
    target = np.asarray(target, dtype=float)
    if target.shape != (4, 4):
        raise KinematicsError("IK target must be a 4x4 pose")
    R = target[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
        raise KinematicsError("IK target rotation must be orthonormal")
    if frame == "gripper":
        offset = model.gripper_offset
    elif frame == "camera":
        offset = model.camera_offset
    else:
        raise KinematicsError(f"unknown IK frame '{frame}'")
    p = params or IkConfig()
    q, ok = _kernels.dls_ik(model.origins, model.axes,
                            np.ascontiguousarray(model.limits[:, 0]),
                            np.ascontiguousarray(model.limits[:, 1]),
                            offset, target, seed,
                            p.damping, p.step_clamp, p.max_iters,
                            p.tol_pos, p.tol_rot)
    return q if ok else None


def body_capsules(model: RobotModel, q) -> list[Capsule]:
    """World-frame collision capsules of every link at configuration q."""
    fk = forward_kinematics(model, q)
    out = []
    for i, caps in enumerate(model.link_capsules):
        T = fk.link_transforms[i]
        for c in caps:
            out.append(Capsule(T[:3, :3] @ c.a + T[:3, 3],
                               T[:3, :3] @ c.b + T[:3, 3], c.radius))
    return out


def capsule_arrays(capsules: list[Capsule]):
    """Pack capsules into (p0s, p1s, radii) arrays for the kernels."""
    n = len(capsules)
    p0 = np.empty((n, 3))
    p1 = np.empty((n, 3))
    r = np.empty(n)
    for i, c in enumerate(capsules):
        p0[i] = c.a
        p1[i] = c.b
        r[i] = c.radius
    return p0, p1, r


# ---------------------------------------------------------------------------
# model file IO
#
# {"joints": [{"axis": [x,y,z], "origin": {"position": [...],
#              "quaternion": [w,x,y,z]}, "limits": [lo, hi]}, ...],
#  "camera_offset": {...}, "gripper_offset": {...}, "split": 4,
#  "capsules": [[{"a": [...], "b": [...], "radius": r}, ...], ...]}


def _tf_from_json(obj: dict) -> np.ndarray:
    return transforms.from_pos_quat(obj["position"], obj["quaternion"])


def _tf_to_json(T: np.ndarray) -> dict:
    pos, quat = transforms.to_pos_quat(T)
    return {"position": pos, "quaternion": quat}


def load_robot(path: str | Path | None = None, strict: bool = True) -> RobotModel:
    """Robot model from a JSON file; None loads the packaged 7-DOF arm."""
    if path is None:
        text = resources.files("alcove").joinpath("data/panda7.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise KinematicsError(f"robot model is not valid JSON: {e}") from e
    try:
        joints = data["joints"]
        axes = [j["axis"] for j in joints]
        origins = [_tf_from_json(j["origin"]) for j in joints]
        limits = [j["limits"] for j in joints]
        caps = [[Capsule(np.array(c["a"]), np.array(c["b"]), c["radius"])
                 for c in link] for link in data["capsules"]]
        return RobotModel(axes, origins, limits,
                          _tf_from_json(data["camera_offset"]),
                          _tf_from_json(data["gripper_offset"]),
                          data["split"], caps, strict=strict)
    except KeyError as e:
        raise KinematicsError(f"robot model missing key {e}") from e


def save_robot(model: RobotModel, path: str | Path) -> None:
    data = {
        "joints": [
            {"axis": list(map(float, model.axes[i])),
             "origin": _tf_to_json(model.origins[i]),
             "limits": list(map(float, model.limits[i]))}
            for i in range(model.dof)
        ],
        "camera_offset": _tf_to_json(model.camera_offset),
        "gripper_offset": _tf_to_json(model.gripper_offset),
        "split": model.body_wrist_split,
        "capsules": [[{"a": list(map(float, c.a)), "b": list(map(float, c.b)),
                       "radius": c.radius} for c in link]
                     for link in model.link_capsules],
    }
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True))
