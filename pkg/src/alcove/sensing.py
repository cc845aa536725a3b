"""Virtual wrist depth camera, ground-truth target detection, and the
observation buffer feeding best-view selection.

Depth values are Euclidean range along each pixel ray (not z-depth);
no-return pixels are +inf. Detection is an oracle: it reports the target
exactly when the target centroid projects into the image, the sight line is
unobstructed in ground truth, the range is within the sensor limit, and the
projected box covers a minimum pixel area.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CameraConfig, SensorConfig
from .kinematics import Viewpoint
from .scenes import Scene, segment_clear


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    max_range: float
    noise_sigma: float = 0.0

    @classmethod
    def from_config(cls, cfg: CameraConfig) -> "CameraModel":
        fov_h = np.deg2rad(cfg.fov_h_deg)
        fov_v = np.deg2rad(cfg.fov_v_deg)
        return cls(width=cfg.width, height=cfg.height,
                   fx=(cfg.width / 2) / np.tan(fov_h / 2),
                   fy=(cfg.height / 2) / np.tan(fov_v / 2),
                   cx=cfg.width / 2, cy=cfg.height / 2,
                   max_range=cfg.max_range, noise_sigma=cfg.noise_sigma)

    def pixel_directions(self) -> np.ndarray:
        """Unit ray directions in the camera frame, shape (h*w, 3),
        row-major over (v, u) with pixel-center offsets."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        gv, gu = np.meshgrid(v, u, indexing="ij")
        d = np.stack([gu, gv, np.ones_like(gu)], axis=-1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class DepthImage:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    max_range: float
    ranges: np.ndarray      # (height, width), +inf = no return
    timestamp: float

    def __post_init__(self):
        if self.ranges.shape != (self.height, self.width):
            raise ValueError("range image shape does not match intrinsics")
        finite = self.ranges[np.isfinite(self.ranges)]
        if finite.size and (np.any(finite <= 0) or np.any(finite > self.max_range + 1e-9)):
            raise ValueError("finite ranges must lie in (0, max_range]")

    def camera(self) -> CameraModel:
        return CameraModel(self.width, self.height, self.fx, self.fy,
                           self.cx, self.cy, self.max_range)

    def ray_directions_world(self, vp: Viewpoint) -> np.ndarray:
        d = self.camera().pixel_directions()
        return np.ascontiguousarray(d @ vp.rotation.T)


def render_depth(scene: Scene, vp: Viewpoint, camera: CameraModel,
                 timestamp: float = 0.0,
                 rng: np.random.Generator | None = None) -> DepthImage:
    """Ray-cast the ground-truth scene through a pinhole camera.

    Deterministic at noise_sigma 0; otherwise Gaussian range noise from the
    provided generator is added to returned pixels.
    """
    dirs_cam = camera.pixel_directions()
    dirs = dirs_cam @ vp.rotation.T
    t, _ = scene.raycast_batch(vp.position, dirs, camera.max_range)
    ranges = t.astype(float)
    if camera.noise_sigma > 0:
        if rng is None:
            raise ValueError("noisy rendering needs an RNG")
        hit = np.isfinite(ranges)
        ranges[hit] += rng.normal(0.0, camera.noise_sigma, size=int(hit.sum()))
        ranges[hit] = np.clip(ranges[hit], 1e-6, camera.max_range)
    ranges[~np.isfinite(ranges)] = np.inf
    return DepthImage(camera.width, camera.height, camera.fx, camera.fy,
                      camera.cx, camera.cy, camera.max_range,
                      ranges.reshape(camera.height, camera.width), timestamp)


def detect_target(scene: Scene, image: DepthImage, vp: Viewpoint,
                  min_area_px: float = 40.0):
    """Oracle detection of the scene target in one observation.

    Returns (detected, bbox) with bbox = (u0, v0, u1, v1) in pixels, the
    clipped projection of the target corners, present iff detected.
    """
    centroid = scene.target.position
    rel = vp.rotation.T @ (centroid - vp.position)
    if rel[2] <= 1e-9:
        return False, None
    u = image.fx * rel[0] / rel[2] + image.cx
    v = image.fy * rel[1] / rel[2] + image.cy
    if not (0 <= u < image.width and 0 <= v < image.height):
        return False, None
    if np.linalg.norm(centroid - vp.position) > image.max_range:
        return False, None
    if not segment_clear(scene, vp.position, centroid, ignore="target"):
        return False, None
    corners = scene.target.corners()
    rel_c = (corners - vp.position) @ vp.rotation
    front = rel_c[:, 2] > 1e-9
    if not np.any(front):
        return False, None
    uu = image.fx * rel_c[front, 0] / rel_c[front, 2] + image.cx
    vv = image.fy * rel_c[front, 1] / rel_c[front, 2] + image.cy
    u0 = float(np.clip(uu.min(), 0, image.width))
    u1 = float(np.clip(uu.max(), 0, image.width))
    v0 = float(np.clip(vv.min(), 0, image.height))
    v1 = float(np.clip(vv.max(), 0, image.height))
    if (u1 - u0) * (v1 - v0) < min_area_px:
        return False, None
    return True, (u0, v0, u1, v1)


@dataclass(frozen=True)
class Observation:
    image: DepthImage
    viewpoint: Viewpoint
    detected: bool
    bbox: tuple | None = None

    def __post_init__(self):
        if self.detected != (self.bbox is not None):
            raise ValueError("bbox must be present exactly when detected")

    @property
    def timestamp(self) -> float:
        return self.image.timestamp


class ObservationBuffer:
    """Sliding window of the most recent k observations, timestamp-ordered."""

    def __init__(self, capacity: int | None = None,
                 cfg: SensorConfig | None = None):
        self.capacity = capacity if capacity is not None else (cfg or SensorConfig()).buffer_size
        if self.capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.entries: list[Observation] = []

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, obs: Observation) -> None:
        if self.entries and obs.timestamp < self.entries[-1].timestamp:
            raise ValueError(
                f"out-of-order observation: {obs.timestamp} < {self.entries[-1].timestamp}")
        self.entries.append(obs)
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    def clear(self) -> None:
        self.entries.clear()


def observation_score(obs: Observation) -> float:
    """Perceptual quality: negated pixel distance between the detection
    bbox center and the image center (0 is best)."""
    u0, v0, u1, v1 = obs.bbox
    bc = np.array([(u0 + u1) / 2, (v0 + v1) / 2])
    ic = np.array([obs.image.width / 2, obs.image.height / 2])
    return -float(np.linalg.norm(bc - ic))


def select_best_observation(buf: ObservationBuffer) -> Observation | None:
    """Highest-scoring detected entry; ties go to the latest timestamp."""
    best = None
    best_score = -np.inf
    for obs in buf.entries:
        if not obs.detected:
            continue
        s = observation_score(obs)
        if s >= best_score:
            best = obs
            best_score = s
    return best


# -- debug dump: 16-byte header (u32 width, u32 height, f32 max_range,
#    f32 sentinel) followed by row-major f32 ranges, no-return = sentinel.

DEPTH_SENTINEL = -1.0


def save_depth(image: DepthImage, path: str | Path) -> None:
    data = image.ranges.astype(np.float32).copy()
    data[~np.isfinite(data)] = DEPTH_SENTINEL
    header = struct.pack("<IIff", image.width, image.height,
                         image.max_range, DEPTH_SENTINEL)
    Path(path).write_bytes(header + data.tobytes())


def load_depth(path: str | Path, timestamp: float = 0.0,
               camera: CameraModel | None = None) -> DepthImage:
    raw = Path(path).read_bytes()
    w, h, max_range, sentinel = struct.unpack("<IIff", raw[:16])
    data = np.frombuffer(raw[16:], dtype=np.float32).reshape(h, w).astype(float)
    data[data == sentinel] = np.inf
    cam = camera or CameraModel(w, h, fx=w / 2.0, fy=h / 2.0,
                                cx=w / 2.0, cy=h / 2.0, max_range=max_range)
    return DepthImage(w, h, cam.fx, cam.fy, cam.cx, cam.cy,
                      float(max_range), data, timestamp)
