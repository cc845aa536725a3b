"""Grasp generation from the best observation: bbox back-projection with
plane-fit normals, antipodal pair sampling with a friction-cone filter, a
map-derived approach direction, and score-descending constrained selection
(IK feasibility, approach-angle limit, free-space approach path).
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .config import GraspConfig, IkConfig, MotionConfig
from .kinematics import Capsule, RobotModel, Viewpoint, inverse_kinematics
from .motion import config_in_collision, plan_path, sweep_free
from .sensing import DepthImage
from .voxelmap import FREE, VoxelMap


class InsufficientObservation(RuntimeError):
    """Too few target points to attempt grasp generation; the caller should
    keep exploring."""


class ApproachEstimationError(RuntimeError):
    """No known free space around the target to derive an approach from."""


@dataclass(frozen=True)
class TargetCloud:
    points: np.ndarray    # (n, 3) world
    normals: np.ndarray   # (n, 3) unit, oriented toward the observing camera
    view_axis: np.ndarray
    camera_position: np.ndarray


@dataclass(frozen=True)
class GraspCandidate:
    pose: np.ndarray   # 4x4; x column closes, z column approaches
    width: float
    score: float

    def __post_init__(self):
        if not 0 < self.score <= 1:
            raise ValueError("grasp score must be in (0, 1]")
        if self.width <= 0:
            raise ValueError("grasp width must be positive")

    @property
    def approach_axis(self) -> np.ndarray:
        return self.pose[:3, 2]

    @property
    def closing_axis(self) -> np.ndarray:
        return self.pose[:3, 0]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]


def extract_target_cloud(image: DepthImage, vp: Viewpoint, bbox,
                         cfg: GraspConfig | None = None) -> TargetCloud:
    """Back-project every finite-depth bbox pixel to a world point and fit
    per-point normals from nearest neighbors, oriented toward the camera.

    Raises InsufficientObservation below the minimum point count.
    """
    cfg = cfg or GraspConfig()
    if bbox is None:
        raise InsufficientObservation("no detection bbox")
    u0, v0, u1, v1 = bbox
    u_lo = max(int(np.floor(u0)), 0)
    u_hi = min(int(np.ceil(u1)), image.width)
    v_lo = max(int(np.floor(v0)), 0)
    v_hi = min(int(np.ceil(v1)), image.height)
    if u_hi <= u_lo or v_hi <= v_lo:
        raise InsufficientObservation("empty bbox")
    dirs = image.camera().pixel_directions().reshape(image.height, image.width, 3)
    sub_r = image.ranges[v_lo:v_hi, u_lo:u_hi]
    sub_d = dirs[v_lo:v_hi, u_lo:u_hi]
    finite = np.isfinite(sub_r)
    if np.count_nonzero(finite) < cfg.min_cloud_points:
        raise InsufficientObservation(
            f"{np.count_nonzero(finite)} points < {cfg.min_cloud_points}")
    d_world = sub_d[finite] @ vp.rotation.T
    points = vp.position + d_world * sub_r[finite][:, None]
    normals = _plane_fit_normals(points, vp.position, cfg.normal_neighbors)
    return TargetCloud(points, normals, vp.viewing_axis.copy(),
                       vp.position.copy())


def _plane_fit_normals(points: np.ndarray, camera: np.ndarray, k: int) -> np.ndarray:
    tree = cKDTree(points)
    k_eff = min(k + 1, len(points))
    _, nbrs = tree.query(points, k=k_eff)
    if k_eff == 1:
        nbrs = nbrs[:, None]
    normals = np.empty_like(points)
    for i in range(len(points)):
        nb = points[nbrs[i]]
        centered = nb - nb.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        n = vt[-1]
        if np.dot(n, camera - points[i]) < 0:
            n = -n
        normals[i] = n / max(np.linalg.norm(n), 1e-12)
    return normals


def mirror_cloud(cloud: TargetCloud, center: np.ndarray) -> TargetCloud:
    """Point-symmetric completion about a centroid: adds each point's mirror
    with the flipped normal. Single-view clouds of a convex object carry no
    opposing surface, so the episode pipeline completes them this way before
    antipodal sampling."""
    center = np.asarray(center, float)
    pts = np.vstack([cloud.points, 2 * center - cloud.points])
    nrm = np.vstack([cloud.normals, -cloud.normals])
    return TargetCloud(pts, nrm, cloud.view_axis, cloud.camera_position)


def _grasp_frame(center: np.ndarray, closing: np.ndarray,
                 view_axis: np.ndarray) -> np.ndarray:
    """Pose with x = closing line and z = approach, the approach being the
    view direction projected orthogonal to the closing line."""
    x = closing / np.linalg.norm(closing)
    z = view_axis - np.dot(view_axis, x) * x
    n = np.linalg.norm(z)
    if n < 1e-6:
        z = np.cross(x, np.array([0.0, 0.0, 1.0]))
        if np.linalg.norm(z) < 1e-6:
            z = np.cross(x, np.array([0.0, 1.0, 0.0]))
        n = np.linalg.norm(z)
    z = z / n
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, 0] = x
    T[:3, 1] = y
    T[:3, 2] = z
    T[:3, 3] = center
    return T


def sample_candidates(cloud: TargetCloud, max_candidates: int = 64,
                      cfg: GraspConfig | None = None) -> list[GraspCandidate]:
    """Antipodal point-pair grasps from an oriented cloud.

    A pair qualifies when the contacts are within the gripper stroke and
    both normals deviate from the (signed) contact line by at most the
    friction half-angle; its score is the mean cosine of the two
    deviations. Deterministic: dense clouds are thinned by even index
    striding, results are the top-scoring candidates.
    """
    cfg = cfg or GraspConfig()
    pts, nrm = cloud.points, cloud.normals
    if len(pts) > cfg.max_pair_points:
        idx = np.linspace(0, len(pts) - 1, cfg.max_pair_points).astype(int)
        pts, nrm = pts[idx], nrm[idx]
    if len(pts) < 2:
        return []
    cos_lim = np.cos(np.deg2rad(cfg.friction_half_angle_deg))
    pairs = sorted(cKDTree(pts).query_pairs(r=cfg.gripper_max_width))
    scored = []
    for i, j in pairs:
        u = pts[j] - pts[i]
        dist = np.linalg.norm(u)
        if dist < 5e-4:
            continue
        u = u / dist
        c1 = float(np.dot(nrm[i], -u))
        c2 = float(np.dot(nrm[j], u))
        if c1 < cos_lim or c2 < cos_lim:
            continue
        score = (c1 + c2) / 2
        center = (pts[i] + pts[j]) / 2
        pose = _grasp_frame(center, u, cloud.view_axis)
        scored.append(GraspCandidate(pose, float(dist), min(score, 1.0)))
    scored.sort(key=lambda g: -g.score)
    return scored[:max_candidates]


def estimate_approach_dir(vmap: VoxelMap, target_centroid, radius: float = 0.25,
                          fallback_axis: np.ndarray | None = None) -> np.ndarray:
    """Unit approach direction pointing from known free space toward the
    target (the gripper travels along it).

    Derived from the centroid of free voxels within `radius`; when that
    centroid is degenerate (symmetric free space) the observing viewpoint's
    axis is used instead. Raises ApproachEstimationError when no free voxel
    is in range.
    """
    t = np.asarray(target_centroid, float)
    free_ids = np.flatnonzero(vmap.state() == FREE)
    if free_ids.size == 0:
        raise ApproachEstimationError("map has no free voxels near the target")
    centers = vmap.voxel_centers(free_ids)
    d = np.linalg.norm(centers - t, axis=1)
    near = centers[d <= radius]
    if near.shape[0] == 0:
        raise ApproachEstimationError(
            f"no free voxels within {radius} m of the target")
    v = near.mean(axis=0) - t
    if np.linalg.norm(v) < 0.1 * radius:
        if fallback_axis is None:
            raise ApproachEstimationError(
                "free space is symmetric around the target and no fallback "
                "viewpoint axis was provided")
        v = -np.asarray(fallback_axis, float)
    return -v / np.linalg.norm(v)


def approach_angle(candidate: GraspCandidate, n: np.ndarray) -> float:
    """Angle (rad) between the candidate approach axis and the desired
    approach direction."""
    c = float(np.clip(np.dot(candidate.approach_axis, n), -1.0, 1.0))
    return float(np.arccos(c))


def finger_clearance_capsules(candidate: GraspCandidate,
                              cfg: GraspConfig) -> list[Capsule]:
    """The two finger sweep volumes flanking the closing span."""
    x = candidate.closing_axis
    z = candidate.approach_axis
    out = []
    for sign in (-1.0, 1.0):
        tip = candidate.center + sign * x * (candidate.width / 2 + cfg.finger_radius)
        out.append(Capsule(tip - z * cfg.finger_length, tip, cfg.finger_radius))
    return out


def select_grasp(candidates: list[GraspCandidate], model: RobotModel,
                 q_current: np.ndarray, vmap: VoxelMap, n: np.ndarray,
                 delta_deg: float, seed: int,
                 grasp_cfg: GraspConfig | None = None,
                 ik_cfg: IkConfig | None = None,
                 motion_cfg: MotionConfig | None = None):
    """Best feasible grasp under the three selection constraints.

    Candidates are tried in descending score order; the first one whose
    approach angle is within delta, whose IK solution is collision-free,
    and whose planned approach trajectory stays in known free space wins.
    Returns (candidate, trajectory, q_grasp) or None. The per-candidate
    planner RNG is derived from (seed, candidate index) so selection is
    reproducible and prefix-stable.

    Also returns statistics: (result, plan_attempts, plan_successes).
    """
    grasp_cfg = grasp_cfg or GraspConfig()
    ik_cfg = ik_cfg or IkConfig()
    motion_cfg = motion_cfg or MotionConfig()
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].score, i))
    delta = np.deg2rad(delta_deg)
    plan_attempts = 0
    plan_successes = 0
    for idx in order:
        cand = candidates[idx]
        if approach_angle(cand, n) > delta:
            continue
        q = inverse_kinematics(model, cand.pose, q_current, ik_cfg)
        if q is None:
            continue
        if config_in_collision(model, q, vmap, motion_cfg):
            continue
        if vmap.capsules_blocked(finger_clearance_capsules(cand, grasp_cfg),
                                 unknown_as_obstacle=False):
            continue
        rng = np.random.default_rng([seed, idx])
        plan_attempts += 1
        traj = plan_path(model, q_current, q, vmap, motion_cfg, rng)
        if traj is None:
            continue
        plan_successes += 1
        if not sweep_free(model, traj, vmap, motion_cfg):
            continue
        return (cand, traj, q), plan_attempts, plan_successes
    return None, plan_attempts, plan_successes


def grasp_pose_quality(candidate: GraspCandidate, ik_feasible: bool,
                       n: np.ndarray) -> float:
    """Geometric score x IK-feasibility indicator x cosine of the approach
    deviation; backward approaches clamp to 0. Always in [0, 1]."""
    if not ik_feasible:
        return 0.0
    c = float(np.clip(np.dot(candidate.approach_axis, np.asarray(n, float)),
                      -1.0, 1.0))
    return candidate.score * max(c, 0.0)
