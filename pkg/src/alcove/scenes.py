"""Ground-truth scenes and the four-level confined-space benchmark.

A scene is a set of oriented boxes: a desk, an open-front container, clutter
inside it, optional near-base obstacles, and one graspable target box. Level
semantics:

  1  basic occlusion: clutter only, target visible along some straight
     approach through the opening
  2  severe occlusion: an interior baffle blocks every straight approach
     from the opening; the camera must pass the baffle to see the target
  3  level-1 occlusion plus obstacles close to the robot base
  4  level-2 occlusion plus the level-3 base clutter

Generation is deterministic per (level, seed) and re-draws layouts until the
level's visibility invariants verify (ray sweeps against ground truth).
"""

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels, transforms

SCENE_VERSION = 1


class SceneParseError(ValueError):
    pass


class SceneGenerationError(RuntimeError):
    pass


class Box:
    """Oriented box. The quaternion (w, x, y, z) is the canonical rotation
    representation so scene files round-trip losslessly; the matrix is
    derived from it."""

    __slots__ = ("name", "position", "quaternion", "half_extents", "rotation")

    def __init__(self, name: str, position, quaternion, half_extents):
        self.name = name
        self.position = np.asarray(position, float)
        self.quaternion = np.asarray(quaternion, float)
        self.half_extents = np.asarray(half_extents, float)
        self.rotation = transforms.quat_to_matrix(self.quaternion)

    def __repr__(self):
        return (f"Box({self.name!r}, pos={self.position.tolist()}, "
                f"half={self.half_extents.tolist()})")

    def __eq__(self, other):
        return (isinstance(other, Box) and self.name == other.name
                and np.array_equal(self.position, other.position)
                and np.array_equal(self.quaternion, other.quaternion)
                and np.array_equal(self.half_extents, other.half_extents))

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1)
                          for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return self.position + (signs * self.half_extents) @ self.rotation.T

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c.min(axis=0), c.max(axis=0)

    def contains(self, point, margin: float = 0.0) -> bool:
        local = self.rotation.T @ (np.asarray(point, float) - self.position)
        return bool(np.all(np.abs(local) <= self.half_extents + margin))

    def distance_to_point(self, point) -> float:
        local = self.rotation.T @ (np.asarray(point, float) - self.position)
        d = np.maximum(np.abs(local) - self.half_extents, 0.0)
        return float(np.linalg.norm(d))


def make_aabb_box(name: str, lo, hi) -> Box:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    return Box(name, (lo + hi) / 2, (1.0, 0.0, 0.0, 0.0), (hi - lo) / 2)


def make_yaw_box(name: str, center, half_extents, yaw: float) -> Box:
    q = (np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2))
    return Box(name, center, q, half_extents)


def boxes_overlap(a: Box, b: Box, margin: float = 0.0) -> bool:
    """Separating-axis test for two oriented boxes, inflated by margin."""
    ra = a.half_extents + margin / 2
    rb = b.half_extents + margin / 2
    R = a.rotation.T @ b.rotation
    t = a.rotation.T @ (b.position - a.position)
    absR = np.abs(R) + 1e-12
    for i in range(3):
        if abs(t[i]) > ra[i] + rb @ absR[i]:
            return False
    for j in range(3):
        if abs(t @ R[:, j]) > ra @ absR[:, j] + rb[j]:
            return False
    for i in range(3):
        for j in range(3):
            ii, ij = (i + 1) % 3, (i + 2) % 3
            ji, jj = (j + 1) % 3, (j + 2) % 3
            lhs = abs(t[ij] * R[ii, j] - t[ii] * R[ij, j])
            rhs = (ra[ii] * absR[ij, j] + ra[ij] * absR[ii, j]
                   + rb[ji] * absR[i, jj] + rb[jj] * absR[i, ji])
            if lhs > rhs:
                return False
    return True


@dataclass(frozen=True)
class Container:
    walls: list[Box]
    opening_center: np.ndarray
    opening_normal: np.ndarray
    interior_center: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, Container) and self.walls == other.walls
                and np.array_equal(self.opening_center, other.opening_center)
                and np.array_equal(self.opening_normal, other.opening_normal)
                and np.array_equal(self.interior_center, other.interior_center))


@dataclass
class Scene:
    level: int
    seed: int
    workspace_lo: np.ndarray
    workspace_hi: np.ndarray
    robot_base: np.ndarray           # 4x4
    container: Container
    obstacles: list[Box]
    target: Box
    heuristic_points: list[np.ndarray]
    time_limit_s: float = 200.0
    _ray_cache: tuple | None = field(default=None, repr=False, compare=False)

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.level == other.level
                and self.seed == other.seed
                and np.array_equal(self.workspace_lo, other.workspace_lo)
                and np.array_equal(self.workspace_hi, other.workspace_hi)
                and np.array_equal(self.robot_base, other.robot_base)
                and self.container == other.container
                and self.obstacles == other.obstacles
                and self.target == other.target
                and len(self.heuristic_points) == len(other.heuristic_points)
                and all(np.array_equal(p, q) for p, q in
                        zip(self.heuristic_points, other.heuristic_points))
                and self.time_limit_s == other.time_limit_s)

    def all_boxes(self) -> list[Box]:
        return [*self.container.walls, *self.obstacles, self.target]

    def obstacle_boxes(self) -> list[Box]:
        """Everything solid except the target."""
        return [*self.container.walls, *self.obstacles]

    def _rays(self):
        if self._ray_cache is None:
            boxes = self.all_boxes()
            inv = np.ascontiguousarray(np.stack([b.rotation.T for b in boxes]))
            cen = np.stack([b.position for b in boxes])
            half = np.stack([b.half_extents for b in boxes])
            names = [b.name for b in boxes]
            self._ray_cache = (inv, cen, half, names)
        return self._ray_cache

    def raycast_batch(self, origin, dirs: np.ndarray, max_range: float):
        """Nearest hits for a bundle of rays: (ranges, hit names or None)."""
        inv, cen, half, names = self._rays()
        t, ids = _kernels.raycast_boxes(np.asarray(origin, float),
                                        np.ascontiguousarray(dirs, dtype=float),
                                        inv, cen, half, max_range)
        return t, [names[i] if i >= 0 else None for i in ids]


def ground_truth_raycast(scene: Scene, origin, direction,
                         max_range: float) -> tuple[float, str] | None:
    """Nearest ray-box hit over all scene geometry, or None."""
    d = np.asarray(direction, float)
    n = np.linalg.norm(d)
    if abs(n - 1.0) > 1e-6:
        raise ValueError("direction must be unit norm")
    t, names = scene.raycast_batch(origin, d.reshape(1, 3), max_range)
    if names[0] is None:
        return None
    return float(t[0]), names[0]


def segment_clear(scene: Scene, a, b, ignore: str | None = None) -> bool:
    """True when nothing (except `ignore`) blocks the open segment a -> b."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    v = b - a
    dist = np.linalg.norm(v)
    if dist < 1e-12:
        return True
    hit = ground_truth_raycast(scene, a, v / dist, dist - 1e-9)
    return hit is None or hit[1] == ignore


# ---------------------------------------------------------------------------
# procedural generation


@dataclass
class SceneGenParams:
    """Layout ranges for the generator; calibrated by construction for a
    desk-scale arm, not taken from published scenes."""
    workspace_lo: tuple = (-0.35, -0.70, -0.05)
    workspace_hi: tuple = (1.05, 0.70, 0.90)
    wall_thickness: float = 0.02
    interior_depth: tuple = (0.38, 0.46)
    interior_width: tuple = (0.44, 0.52)
    interior_height: tuple = (0.34, 0.42)
    front_x: tuple = (0.38, 0.44)
    center_y: tuple = (-0.05, 0.05)
    clutter_count: tuple = (2, 4)
    clutter_half: tuple = (0.02, 0.05)
    target_half_xy: tuple = (0.020, 0.030)
    target_half_z: tuple = (0.035, 0.050)
    base_clutter_count: tuple = (2, 3)
    base_clutter_radius: tuple = (0.20, 0.32)
    base_clutter_half: tuple = (0.03, 0.06)
    base_clutter_height: tuple = (0.10, 0.16)
    baffle_gap: tuple = (0.15, 0.19)
    time_limit_s: float = 200.0
    max_attempts: int = 100
    sweep_grid: tuple = (9, 7)
    sensor_range: float = 1.5
    reach: tuple = (0.25, 0.82)


def approach_visibility_count(scene: Scene, params: SceneGenParams | None = None) -> int:
    """Number of straight approaches from the opening plane that see the
    target centroid unobstructed (the level-1 vs level-2 discriminator)."""
    p = params or SceneGenParams()
    c = scene.container
    y0, y1, z0, z1 = _opening_extent(c)
    eps = 0.02
    ys = np.linspace(y0 + eps, y1 - eps, p.sweep_grid[0])
    zs = np.linspace(z0 + eps, z1 - eps, p.sweep_grid[1])
    x = c.opening_center[0] - 1e-3
    count = 0
    for y in ys:
        for z in zs:
            origin = np.array([x, y, z])
            if np.linalg.norm(scene.target.position - origin) > p.sensor_range:
                continue
            if segment_clear(scene, origin, scene.target.position, ignore="target"):
                count += 1
    return count


def _opening_extent(c: Container) -> tuple[float, float, float, float]:
    left = next(b for b in c.walls if b.name == "wall_left")
    right = next(b for b in c.walls if b.name == "wall_right")
    floor = next(b for b in c.walls if b.name == "wall_floor")
    top = next(b for b in c.walls if b.name == "wall_top")
    y0 = left.position[1] + left.half_extents[1]
    y1 = right.position[1] - right.half_extents[1]
    z0 = floor.position[2] + floor.half_extents[2]
    z1 = top.position[2] - top.half_extents[2]
    return y0, y1, z0, z1


def interior_visibility_points(scene: Scene, params: SceneGenParams | None = None,
                               clearance: float = 0.055) -> list[np.ndarray]:
    """Reachable free-space points with clear sight of the target centroid;
    generation requires a few so every scene stays solvable."""
    p = params or SceneGenParams()
    c = scene.container
    y0, y1, z0, z1 = _opening_extent(c)
    back = next(b for b in c.walls if b.name == "wall_back")
    x0 = c.opening_center[0]
    x1 = back.position[0] - back.half_extents[0]
    pts = []
    boxes = scene.all_boxes()
    for x in np.arange(x0 + 0.04, x1 - 0.03, 0.045):
        for y in np.arange(y0 + 0.05, y1 - 0.04, 0.045):
            for z in np.arange(z0 + 0.05, z1 - 0.04, 0.045):
                pt = np.array([x, y, z])
                r = np.linalg.norm(pt - scene.robot_base[:3, 3])
                if not p.reach[0] <= r <= p.reach[1]:
                    continue
                if min(b.distance_to_point(pt) for b in boxes) < clearance:
                    continue
                if np.linalg.norm(scene.target.position - pt) > p.sensor_range:
                    continue
                if segment_clear(scene, pt, scene.target.position, ignore="target"):
                    pts.append(pt)
    return pts


def free_fraction_near_base(scene: Scene, radius: float = 0.35,
                            samples: int = 12) -> float:
    """Fraction of a sampling grid around the robot base not inside any box
    (the kinematic-constraint proxy separating levels 3/4 from 1/2)."""
    base = scene.robot_base[:3, 3]
    xs = np.linspace(-radius, radius, samples)
    zs = np.linspace(0.02, 0.40, 6)
    boxes = scene.all_boxes()
    free = total = 0
    for x in xs:
        for y in xs:
            if x * x + y * y > radius * radius:
                continue
            for z in zs:
                pt = base + np.array([x, y, z])
                total += 1
                if not any(b.contains(pt) for b in boxes):
                    free += 1
    return free / max(total, 1)


def _draw_container(rng, p: SceneGenParams):
    t = p.wall_thickness
    depth = rng.uniform(*p.interior_depth)
    width = rng.uniform(*p.interior_width)
    height = rng.uniform(*p.interior_height)
    x_front = rng.uniform(*p.front_x)
    y_c = rng.uniform(*p.center_y)
    x0, x1 = x_front, x_front + depth
    y0, y1 = y_c - width / 2, y_c + width / 2
    z0, z1 = t, t + height     # interior floor sits one thickness above desk
    walls = [
        make_aabb_box("wall_floor", (x0 - t, y0 - t, 0.0), (x1 + t, y1 + t, z0)),
        make_aabb_box("wall_back", (x1, y0 - t, z0), (x1 + t, y1 + t, z1)),
        make_aabb_box("wall_left", (x0 - t, y0 - t, z0), (x1 + t, y0, z1)),
        make_aabb_box("wall_right", (x0 - t, y1, z0), (x1 + t, y1 + t, z1)),
        make_aabb_box("wall_top", (x0 - t, y0 - t, z1), (x1 + t, y1 + t, z1 + t)),
    ]
    opening_center = np.array([x0, y_c, (z0 + z1) / 2])
    interior_center = np.array([(x0 + x1) / 2, y_c, (z0 + z1) / 2])
    cont = Container(walls, opening_center, np.array([-1.0, 0.0, 0.0]),
                     interior_center)
    return cont, (x0, x1, y0, y1, z0, z1)


def _place_on_floor(rng, name, bounds, half, z0, yaw=None):
    x0, x1, y0, y1 = bounds
    x = rng.uniform(x0 + half[0] * 1.5, x1 - half[0] * 1.5)
    y = rng.uniform(y0 + half[1] * 1.5, y1 - half[1] * 1.5)
    yaw = rng.uniform(-np.pi, np.pi) if yaw is None else yaw
    return make_yaw_box(name, (x, y, z0 + half[2]), half, yaw)


def generate_scene(level: int, seed: int,
                   params: SceneGenParams | None = None) -> Scene:
    """Deterministic scene for (level, seed); retries layouts drawn from the
    seed until the level invariants hold, then returns. Raises
    SceneGenerationError when max_attempts layouts all fail."""
    if level not in (1, 2, 3, 4):
        raise ValueError(f"level must be 1..4, got {level}")
    p = params or SceneGenParams()
    rng = np.random.default_rng([1009, level, seed])
    for _ in range(p.max_attempts):
        scene = _draw_scene(rng, level, seed, p)
        if scene is None:
            continue
        vis = approach_visibility_count(scene, p)
        if level in (1, 3) and vis < 2:
            continue
        if level in (2, 4):
            if vis != 0:
                continue
            if len(interior_visibility_points(scene, p)) < 3:
                continue
        return scene
    raise SceneGenerationError(
        f"no valid level-{level} layout found for seed {seed} "
        f"in {p.max_attempts} attempts")


def _draw_scene(rng, level, seed, p: SceneGenParams) -> Scene | None:
    container, (x0, x1, y0, y1, z0, z1) = _draw_container(rng, p)
    ws_lo = np.array(p.workspace_lo)
    ws_hi = np.array(p.workspace_hi)
    desk = make_aabb_box("desk", (ws_lo[0], ws_lo[1], -0.05),
                         (ws_hi[0], ws_hi[1], 0.0))
    obstacles = [desk]

    half_t = np.array([rng.uniform(*p.target_half_xy),
                       rng.uniform(*p.target_half_xy),
                       rng.uniform(*p.target_half_z)])
    yaw_t = rng.uniform(-np.pi / 6, np.pi / 6)

    if level in (2, 4):
        gap = rng.uniform(*p.baffle_gap)
        gap_side = rng.choice([-1, 1])  # which wall the gap hugs
        bx = rng.uniform(x0 + 0.45 * (x1 - x0), x0 + 0.60 * (x1 - x0))
        if gap_side > 0:      # gap at +y wall, baffle spans from -y wall
            by0, by1 = y0, y1 - gap
        else:
            by0, by1 = y0 + gap, y1
        baffle = make_aabb_box("baffle", (bx - p.wall_thickness / 2, by0, z0),
                               (bx + p.wall_thickness / 2, by1, z1))
        obstacles.append(baffle)
        # target in the shadow zone: behind the baffle, toward the covered wall
        ty_lo, ty_hi = (by0 + 0.05, by1 - 0.08) if gap_side > 0 \
            else (by0 + 0.08, by1 - 0.05)
        tx = rng.uniform(bx + 0.07, x1 - 0.06)
        ty = rng.uniform(ty_lo, ty_hi)
        target = make_yaw_box("target", (tx, ty, z0 + half_t[2]), half_t, yaw_t)
    else:
        tx = rng.uniform(x0 + 0.30 * (x1 - x0), x0 + 0.75 * (x1 - x0))
        ty = rng.uniform(y0 + 0.08, y1 - 0.08)
        target = make_yaw_box("target", (tx, ty, z0 + half_t[2]), half_t, yaw_t)

    n_clutter = int(rng.integers(p.clutter_count[0], p.clutter_count[1] + 1))
    for i in range(n_clutter):
        half = rng.uniform(p.clutter_half[0], p.clutter_half[1], size=3)
        for _ in range(20):
            box = _place_on_floor(rng, f"clutter_{i}", (x0, x1, y0, y1), half, z0)
            if boxes_overlap(box, target, margin=0.06):
                continue
            if any(o.name != "desk" and boxes_overlap(box, o, margin=0.01)
                   for o in obstacles):
                continue
            obstacles.append(box)
            break

    base = np.eye(4)
    if level in (3, 4):
        n_base = int(rng.integers(p.base_clutter_count[0],
                                  p.base_clutter_count[1] + 1))
        for i in range(n_base):
            r = rng.uniform(*p.base_clutter_radius)
            ang = rng.choice([-1, 1]) * rng.uniform(np.deg2rad(40), np.deg2rad(140))
            hx = rng.uniform(*p.base_clutter_half)
            hz = rng.uniform(*p.base_clutter_height) / 2
            c = np.array([r * np.cos(ang), r * np.sin(ang), hz])
            box = make_yaw_box(f"base_{i}", c, (hx, hx, hz), rng.uniform(-np.pi, np.pi))
            if any(boxes_overlap(box, o, margin=0.01) for o in obstacles[1:]):
                return None
            if np.linalg.norm(c[:2]) < 0.14:   # keep the pedestal itself clear
                return None
            obstacles.append(box)

    if any(boxes_overlap(target, o) for o in obstacles):
        return None

    heuristics = [container.opening_center.copy(), container.interior_center.copy()]
    return Scene(level=level, seed=seed, workspace_lo=ws_lo, workspace_hi=ws_hi,
                 robot_base=base, container=container, obstacles=obstacles,
                 target=target, heuristic_points=heuristics,
                 time_limit_s=p.time_limit_s)


# ---------------------------------------------------------------------------
# scene files (versioned JSON)


def _box_to_json(b: Box) -> dict:
    return {"name": b.name,
            "position": list(map(float, b.position)),
            "quaternion": list(map(float, b.quaternion)),
            "half_extents": list(map(float, b.half_extents))}


_BOX_KEYS = {"name", "position", "quaternion", "half_extents"}


def _box_from_json(obj: dict, where: str) -> Box:
    for key in ("name", "position", "quaternion", "half_extents"):
        if key not in obj:
            raise SceneParseError(f"{where}: missing key '{key}'")
    extra = set(obj) - _BOX_KEYS
    if extra:
        warnings.warn(f"{where}: ignoring unknown keys {sorted(extra)}")
    return Box(obj["name"], obj["position"], obj["quaternion"],
               obj["half_extents"])


_SCENE_KEYS = {"version", "level", "seed", "time_limit_s", "workspace_aabb",
               "robot_base", "container", "obstacles", "target",
               "heuristic_points"}


def scene_to_json(scene: Scene) -> dict:
    pos, quat = transforms.to_pos_quat(scene.robot_base)
    return {
        "version": SCENE_VERSION,
        "level": scene.level,
        "seed": scene.seed,
        "time_limit_s": scene.time_limit_s,
        "workspace_aabb": {"lo": list(map(float, scene.workspace_lo)),
                           "hi": list(map(float, scene.workspace_hi))},
        "robot_base": {"position": pos, "quaternion": quat},
        "container": {
            "walls": [_box_to_json(b) for b in scene.container.walls],
            "opening_center": list(map(float, scene.container.opening_center)),
            "opening_normal": list(map(float, scene.container.opening_normal)),
            "interior_center": list(map(float, scene.container.interior_center)),
        },
        "obstacles": [_box_to_json(b) for b in scene.obstacles],
        "target": _box_to_json(scene.target),
        "heuristic_points": [list(map(float, pt)) for pt in scene.heuristic_points],
    }


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_json(scene), indent=1, sort_keys=True))


def scene_from_json(data: dict) -> Scene:
    if "version" not in data:
        raise SceneParseError("scene: missing key 'version'")
    if data["version"] != SCENE_VERSION:
        raise SceneParseError(
            f"scene version {data['version']} not supported (expected {SCENE_VERSION})")
    for key in sorted(_SCENE_KEYS - {"version"}):
        if key not in data:
            raise SceneParseError(f"scene: missing key '{key}'")
    extra = set(data) - _SCENE_KEYS
    if extra:
        warnings.warn(f"scene: ignoring unknown keys {sorted(extra)}")
    cont = data["container"]
    for key in ("walls", "opening_center", "opening_normal", "interior_center"):
        if key not in cont:
            raise SceneParseError(f"scene container: missing key '{key}'")
    container = Container(
        [_box_from_json(b, "container wall") for b in cont["walls"]],
        np.asarray(cont["opening_center"], float),
        np.asarray(cont["opening_normal"], float),
        np.asarray(cont["interior_center"], float))
    return Scene(
        level=int(data["level"]),
        seed=int(data["seed"]),
        workspace_lo=np.asarray(data["workspace_aabb"]["lo"], float),
        workspace_hi=np.asarray(data["workspace_aabb"]["hi"], float),
        robot_base=transforms.from_pos_quat(data["robot_base"]["position"],
                                            data["robot_base"]["quaternion"]),
        container=container,
        obstacles=[_box_from_json(b, "obstacle") for b in data["obstacles"]],
        target=_box_from_json(data["target"], "target"),
        heuristic_points=[np.asarray(pt, float) for pt in data["heuristic_points"]],
        time_limit_s=float(data["time_limit_s"]),
    )


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneParseError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    return scene_from_json(data)
