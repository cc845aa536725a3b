"""Joint-space collision checking and point-to-point planning against the
voxel map: used to re-validate exploration edges, reach scan waypoints, and
drive the grasp approach.
"""

from dataclasses import dataclass

import numpy as np

from .config import MotionConfig
from .kinematics import RobotModel, body_capsules, joint_distance, manipulability
from .voxelmap import VoxelMap


@dataclass(frozen=True)
class Trajectory:
    waypoints: np.ndarray   # (n, d); consecutive rows differ by <= resolution
    length: float           # radians, sum of segment joint distances
    duration: float         # seconds at the configured joint speed

    def end(self) -> np.ndarray:
        return self.waypoints[-1]


def densify(a: np.ndarray, b: np.ndarray, resolution: float) -> np.ndarray:
    """Waypoints from a to b inclusive, spaced at most `resolution` apart."""
    dist = joint_distance(a, b)
    steps = max(int(np.ceil(dist / resolution)), 1)
    ts = np.linspace(0.0, 1.0, steps + 1)
    return a[None, :] + ts[:, None] * (b - a)[None, :]


def densify_path(waypoints: list[np.ndarray], resolution: float) -> np.ndarray:
    out = [np.asarray(waypoints[0], float).reshape(1, -1)]
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        out.append(densify(np.asarray(a, float), np.asarray(b, float), resolution)[1:])
    return np.vstack(out)


def path_length(waypoints: np.ndarray) -> float:
    if len(waypoints) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(waypoints, axis=0), axis=1)))


def make_trajectory(waypoints: np.ndarray, cfg: MotionConfig) -> Trajectory:
    length = path_length(waypoints)
    return Trajectory(np.asarray(waypoints, float), length,
                      length / cfg.joint_speed)


def config_in_collision(model: RobotModel, q, vmap: VoxelMap,
                        cfg: MotionConfig,
                        unknown_as_obstacle: bool | None = None) -> bool:
    """Body capsules against the map, plus singularity rejection below the
    manipulability floor."""
    if unknown_as_obstacle is None:
        unknown_as_obstacle = cfg.unknown_as_obstacle
    caps = body_capsules(model, q)
    if vmap.capsules_blocked(caps, unknown_as_obstacle,
                             inflate=vmap.resolution / 2 + cfg.collision_margin):
        return True
    return manipulability(model, q) < cfg.singularity_floor


def edge_free(model: RobotModel, qa, qb, vmap: VoxelMap, cfg: MotionConfig,
              unknown_as_obstacle: bool | None = None) -> bool:
    for q in densify(np.asarray(qa, float), np.asarray(qb, float),
                     cfg.densify_resolution):
        if config_in_collision(model, q, vmap, cfg, unknown_as_obstacle):
            return False
    return True


def sweep_free(model: RobotModel, traj: Trajectory, vmap: VoxelMap,
               cfg: MotionConfig,
               unknown_as_obstacle: bool | None = None) -> bool:
    """Whole-trajectory freedom: every densified waypoint's body must lie in
    map free space."""
    wps = densify_path(list(traj.waypoints), cfg.densify_resolution)
    return all(not config_in_collision(model, q, vmap, cfg, unknown_as_obstacle)
               for q in wps)


def _steer(q_from: np.ndarray, q_to: np.ndarray, step: float) -> np.ndarray:
    d = joint_distance(q_from, q_to)
    if d <= step:
        return q_to
    return q_from + (q_to - q_from) * (step / d)


def _nearest(nodes: list, q: np.ndarray) -> int:
    ds = [joint_distance(n[0], q) for n in nodes]
    return int(np.argmin(ds))


def _trace(nodes: list, idx: int) -> list[np.ndarray]:
    path = []
    while idx is not None:
        path.append(nodes[idx][0])
        idx = nodes[idx][1]
    return path[::-1]


def plan_path(model: RobotModel, q_start, q_goal, vmap: VoxelMap,
              cfg: MotionConfig, rng: np.random.Generator,
              unknown_as_obstacle: bool | None = None) -> Trajectory | None:
    """Bidirectional RRT between two configurations.

    Samples are goal-biased, extensions capped at cfg.step; the other tree
    greedily connects after every extension. The joined path is shortcut
    smoothed, densified, and fully re-validated. Returns None when the goal
    is in collision or the iteration budget runs out (infeasible, not an
    error).
    """
    q_start = model.check_config(q_start)
    q_goal = model.check_config(q_goal)
    if not model.within_limits(q_goal):
        return None
    if joint_distance(q_start, q_goal) < 1e-12:
        return Trajectory(q_start.reshape(1, -1), 0.0, 0.0)
    if config_in_collision(model, q_goal, vmap, cfg, unknown_as_obstacle):
        return None

    if edge_free(model, q_start, q_goal, vmap, cfg, unknown_as_obstacle):
        path = [q_start, q_goal]
        return _finalize(model, path, vmap, cfg, rng, unknown_as_obstacle)

    lo, hi = model.limits[:, 0], model.limits[:, 1]
    tree_a = [(q_start, None)]
    tree_b = [(q_goal, None)]
    a_is_start = True
    for _ in range(cfg.max_iters):
        if rng.random() < cfg.goal_bias:
            q_rand = tree_b[-1][0]
        else:
            q_rand = rng.uniform(lo, hi)
        near = _nearest(tree_a, q_rand)
        q_new = _steer(tree_a[near][0], q_rand, cfg.step)
        if not edge_free(model, tree_a[near][0], q_new, vmap, cfg,
                         unknown_as_obstacle):
            continue
        tree_a.append((q_new, near))
        # greedy connect from the other tree
        idx = _nearest(tree_b, q_new)
        while True:
            q_ext = _steer(tree_b[idx][0], q_new, cfg.step)
            if not edge_free(model, tree_b[idx][0], q_ext, vmap, cfg,
                             unknown_as_obstacle):
                break
            tree_b.append((q_ext, idx))
            idx = len(tree_b) - 1
            if joint_distance(q_ext, q_new) < 1e-12:
                pa = _trace(tree_a, len(tree_a) - 1)
                pb = _trace(tree_b, idx)
                path = pa + pb[::-1][1:] if a_is_start else pb + pa[::-1][1:]
                return _finalize(model, path, vmap, cfg, rng,
                                 unknown_as_obstacle)
        tree_a, tree_b = tree_b, tree_a
        a_is_start = not a_is_start
    return None


def _finalize(model, path, vmap, cfg, rng, unknown_as_obstacle) -> Trajectory | None:
    path = _shortcut(model, path, vmap, cfg, rng, unknown_as_obstacle)
    wps = densify_path(path, cfg.densify_resolution)
    for q in wps:
        if config_in_collision(model, q, vmap, cfg, unknown_as_obstacle):
            return None
    return make_trajectory(wps, cfg)


def _shortcut(model, path, vmap, cfg, rng, unknown_as_obstacle):
    path = [np.asarray(p, float) for p in path]
    for _ in range(cfg.shortcut_attempts):
        if len(path) < 3:
            break
        i = int(rng.integers(0, len(path) - 2))
        j = int(rng.integers(i + 2, len(path)))
        if edge_free(model, path[i], path[j], vmap, cfg, unknown_as_obstacle):
            path = path[:i + 1] + path[j:]
    return path
