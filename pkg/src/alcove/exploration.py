"""Viewpoint exploration: near-field safety scan, biased viewpoint RRT,
multi-term utility scoring, and next-best-view selection.

Each tree node pairs a camera viewpoint with the joint configuration that
realizes it; edges are collision-validated joint-space segments, so any
selected node is reachable along its tree path. Node utility is the
weighted sum of information gain, exploration momentum, manipulability and
heuristic alignment, normalized by the joint-space cost of reaching it.
"""

from dataclasses import dataclass, field

import numpy as np

from . import transforms
from .config import ExplorationConfig, IkConfig, MotionConfig
from .kinematics import (RobotModel, Viewpoint, body_capsules,
                         forward_kinematics, inverse_kinematics,
                         manipulability)
from .motion import config_in_collision, densify
from .voxelmap import FrontierCluster, VoxelMap


@dataclass
class ExplorationNode:
    node_id: int
    viewpoint: Viewpoint
    config: np.ndarray
    parent: int | None = None
    edge_path: np.ndarray | None = None   # joint waypoints parent -> node
    cost: float = 0.0
    gain: float = 0.0
    momentum: float = 0.0
    manip: float = 0.0
    heuristic: float = 0.0
    utility: float = 0.0


@dataclass(frozen=True)
class UtilityWeights:
    w_gain: float = 1.0
    w_momentum: float = 0.3
    w_manip: float = 5.0
    w_heuristic: float = 0.5
    bias_frontier: float = 0.5
    bias_prior: float = 0.2

    def __post_init__(self):
        w = (self.w_gain, self.w_momentum, self.w_manip, self.w_heuristic)
        if any(v < 0 for v in w) or not any(v > 0 for v in w):
            raise ValueError("weights must be non-negative and not all zero")
        if self.bias_frontier < 0 or self.bias_prior < 0 \
                or self.bias_frontier + self.bias_prior > 1.0 + 1e-12:
            raise ValueError("sampling biases must be >= 0 and sum to <= 1")

    @classmethod
    def from_config(cls, cfg: ExplorationConfig) -> "UtilityWeights":
        return cls(cfg.w_gain, cfg.w_momentum, cfg.w_manip, cfg.w_heuristic,
                   cfg.bias_frontier, cfg.bias_prior)


@dataclass
class ExplorationTree:
    nodes: list[ExplorationNode] = field(default_factory=list)
    attempts: int = 0
    ik_failures: int = 0
    collision_failures: int = 0

    @property
    def root(self) -> ExplorationNode:
        return self.nodes[0]

    def path_to(self, node: ExplorationNode) -> list[ExplorationNode]:
        chain = [node]
        while chain[-1].parent is not None:
            chain.append(self.nodes[chain[-1].parent])
        return chain[::-1]

    def joint_path(self, node: ExplorationNode) -> np.ndarray:
        """Concatenated edge waypoints from the root to the node."""
        chain = self.path_to(node)
        parts = [chain[0].config.reshape(1, -1)]
        for n in chain[1:]:
            parts.append(n.edge_path[1:])
        return np.vstack(parts)


# ---------------------------------------------------------------------------
# near-field awareness scan


def frustum_visible_mask(points: np.ndarray, vp: Viewpoint,
                         fov: tuple[float, float], max_range: float) -> np.ndarray:
    """Which points fall inside the camera frustum (no occlusion test)."""
    rel = (points - vp.position) @ vp.rotation
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = rel[:, 2] > 1e-9
        ok &= np.abs(rel[:, 0]) <= rel[:, 2] * np.tan(fov[0] / 2)
        ok &= np.abs(rel[:, 1]) <= rel[:, 2] * np.tan(fov[1] / 2)
        ok &= np.linalg.norm(rel, axis=1) <= max_range
    return ok


def plan_near_field_scan(model: RobotModel, q_init: np.ndarray,
                         safety_box: tuple[np.ndarray, np.ndarray],
                         vmap: VoxelMap,
                         fov: tuple[float, float], max_range: float,
                         rng: np.random.Generator,
                         candidates: int = 64, k_max: int = 6,
                         min_gain: int = 25) -> list[np.ndarray]:
    """Greedy wrist-only waypoints covering the safety box.

    Body joints stay frozen at q_init; wrist joints are sampled uniformly.
    Each step picks the candidate whose camera frustum covers the most
    still-unknown, not-yet-covered safety-box voxels, stopping early when
    the marginal coverage drops below min_gain voxels.
    """
    q_init = model.check_config(q_init)
    if candidates < 1:
        raise ValueError("need at least one scan candidate")
    lo, hi = safety_box
    res = vmap.resolution
    xs = [np.arange(lo[i] + res / 2, hi[i], res) for i in range(3)]
    grid = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1).reshape(-1, 3)
    idx = np.floor((grid - vmap.origin) / res).astype(int)
    valid = np.all((idx >= 0) & (idx < vmap.dims), axis=1)
    flat = (idx[:, 0] * vmap.dims[1] + idx[:, 1]) * vmap.dims[2] + idx[:, 2]
    state = np.ones(grid.shape[0], dtype=np.int8)  # outside the map: known
    state[valid] = vmap.state()[flat[valid]]
    grid = grid[state == 0]
    if grid.shape[0] == 0:
        return []

    split = model.body_wrist_split
    configs = []
    masks = []
    for _ in range(candidates):
        q = q_init.copy()
        q[split:] = rng.uniform(model.limits[split:, 0], model.limits[split:, 1])
        # cautious scan: drop wrist poses already known to hit mapped obstacles
        if vmap.capsules_blocked(body_capsules(model, q), unknown_as_obstacle=False):
            continue
        vp = forward_kinematics(model, q).camera
        configs.append(q)
        masks.append(frustum_visible_mask(grid, vp, fov, max_range))
    if not configs:
        return []

    covered = np.zeros(grid.shape[0], dtype=bool)
    chosen: list[np.ndarray] = []
    for _ in range(k_max):
        gains = [int(np.count_nonzero(m & ~covered)) for m in masks]
        best = int(np.argmax(gains))
        if gains[best] < min_gain:
            break
        chosen.append(configs[best])
        covered |= masks[best]
    return chosen


# ---------------------------------------------------------------------------
# tree expansion


def _orientation_target(pos: np.ndarray, clusters: list[FrontierCluster],
                        priors: list[np.ndarray],
                        fallback: np.ndarray) -> np.ndarray:
    if clusters:
        ds = [np.linalg.norm(c.centroid - pos) for c in clusters]
        return clusters[int(np.argmin(ds))].centroid
    if priors:
        ds = [np.linalg.norm(p - pos) for p in priors]
        return priors[int(np.argmin(ds))]
    return fallback


def expand_tree(vmap: VoxelMap, model: RobotModel, root: ExplorationNode,
                clusters: list[FrontierCluster], priors: list[np.ndarray],
                weights: UtilityWeights, budget: int,
                workspace: tuple[np.ndarray, np.ndarray],
                cfg: ExplorationConfig, ik_cfg: IkConfig,
                motion_cfg: MotionConfig,
                rng: np.random.Generator,
                attempt_budget: int | None = None) -> ExplorationTree:
    """Grow the viewpoint tree from the current configuration.

    Positions are sampled near a random frontier centroid with probability
    bias_frontier, near a random prior with probability bias_prior, else
    uniformly in the workspace; each sample is steered from its nearest
    tree node, oriented toward the nearest frontier, realized with IK
    seeded from that node, and attached only when the interpolated joint
    edge stays collision-free. IK and collision rejects are counted, not
    raised.
    """
    tree = ExplorationTree(nodes=[root])
    if attempt_budget is None:
        attempt_budget = cfg.attempt_budget
    lo, hi = workspace
    center = (np.asarray(lo) + np.asarray(hi)) / 2
    accepted = 0
    while accepted < budget and tree.attempts < attempt_budget:
        tree.attempts += 1
        r = rng.random()
        if r < weights.bias_frontier and clusters:
            c = clusters[int(rng.integers(len(clusters)))]
            pos = c.centroid + rng.normal(0.0, cfg.sample_sigma, 3)
        elif r < weights.bias_frontier + weights.bias_prior and priors:
            p = priors[int(rng.integers(len(priors)))]
            pos = p + rng.normal(0.0, cfg.sample_sigma, 3)
        else:
            pos = rng.uniform(lo, hi)

        dists = [np.linalg.norm(n.viewpoint.position - pos) for n in tree.nodes]
        near = tree.nodes[int(np.argmin(dists))]
        d = np.linalg.norm(pos - near.viewpoint.position)
        if d > cfg.step_max:
            pos = near.viewpoint.position + (pos - near.viewpoint.position) * (cfg.step_max / d)

        look = _orientation_target(pos, clusters, priors, center)
        R = transforms.look_at_rotation(pos, look)
        target = np.eye(4)
        target[:3, :3] = R
        target[:3, 3] = pos
        q = inverse_kinematics(model, target, near.config, ik_cfg, frame="camera")
        if q is None:
            tree.ik_failures += 1
            continue
        edge = densify(near.config, q, cfg.edge_resolution)
        if any(config_in_collision(model, w, vmap, motion_cfg) for w in edge):
            tree.collision_failures += 1
            continue
        vp = forward_kinematics(model, q).camera
        cost = max(near.cost + float(np.sum(
            np.linalg.norm(np.diff(edge, axis=0), axis=1))), cfg.cost_floor)
        node = ExplorationNode(node_id=len(tree.nodes), viewpoint=vp, config=q,
                               parent=near.node_id, edge_path=edge, cost=cost)
        tree.nodes.append(node)
        accepted += 1
    return tree


def make_root(model: RobotModel, q: np.ndarray,
              cfg: ExplorationConfig) -> ExplorationNode:
    vp = forward_kinematics(model, q).camera
    return ExplorationNode(node_id=0, viewpoint=vp, config=np.asarray(q, float),
                           cost=cfg.cost_floor)


# ---------------------------------------------------------------------------
# utility terms


def info_gain(vmap: VoxelMap, node: ExplorationNode,
              fov: tuple[float, float], max_range: float,
              rays: tuple[int, int] | None = None) -> float:
    """Volume (m^3) of unknown space visible from the node's viewpoint."""
    count = vmap.count_unknown_visible(node.viewpoint, fov, max_range, rays)
    return count * vmap.resolution ** 3


def momentum(node: ExplorationNode, prev_selected: np.ndarray,
             root: np.ndarray) -> float:
    """Raw dot product rewarding continuation of the previous exploration
    direction (m^2); negative values are allowed."""
    return float(np.dot(np.asarray(prev_selected, float) - np.asarray(root, float),
                        node.viewpoint.position - np.asarray(root, float)))


def heuristic_gain(node: ExplorationNode, priors: list[np.ndarray]) -> float:
    """Best cosine alignment between the viewing axis and the directions to
    the prior points; coincident priors are skipped (all coincident -> 0)."""
    best = None
    t = node.viewpoint.position
    axis = node.viewpoint.viewing_axis
    for p in priors:
        v = np.asarray(p, float) - t
        n = np.linalg.norm(v)
        if n < 1e-12:
            continue
        c = float(np.dot(axis, v / n))
        if best is None or c > best:
            best = c
    return 0.0 if best is None else best


def motion_cost(tree: ExplorationTree, node: ExplorationNode,
                cost_floor: float = 1e-3) -> float:
    """Joint-space path length from the root along tree edges, clamped
    below at the cost floor (the root itself sits at the floor)."""
    chain = tree.path_to(node)
    total = 0.0
    for n in chain[1:]:
        total += float(np.sum(np.linalg.norm(np.diff(n.edge_path, axis=0), axis=1)))
    return max(total, cost_floor)


def utility(node: ExplorationNode, weights: UtilityWeights) -> float:
    """Cost-normalized weighted reward of a node's cached terms."""
    reward = (weights.w_gain * node.gain
              + weights.w_momentum * node.momentum
              + weights.w_manip * node.manip
              + weights.w_heuristic * node.heuristic)
    return reward / node.cost


def evaluate_tree(tree: ExplorationTree, vmap: VoxelMap,
                  weights: UtilityWeights, fov: tuple[float, float],
                  max_range: float, priors: list[np.ndarray],
                  prev_selected: np.ndarray | None,
                  model: RobotModel,
                  rays: tuple[int, int] | None = None) -> None:
    """Populate every node's cached terms and utility in place."""
    root_pos = tree.root.viewpoint.position
    prev = root_pos if prev_selected is None else prev_selected
    for node in tree.nodes:
        node.gain = info_gain(vmap, node, fov, max_range, rays)
        node.momentum = momentum(node, prev, root_pos)
        node.manip = manipulability(model, node.config)
        node.heuristic = heuristic_gain(node, priors)
        node.utility = utility(node, weights)


def select_nbv(tree: ExplorationTree,
               weights: UtilityWeights | None = None) -> ExplorationNode | None:
    """Highest-utility non-root node (ties: lowest id); None when the tree
    holds only its root, signaling a replan with a larger budget."""
    best = None
    for node in tree.nodes[1:]:
        u = utility(node, weights) if weights is not None else node.utility
        if weights is not None:
            node.utility = u
        if best is None or u > best.utility:
            best = node
    return best
