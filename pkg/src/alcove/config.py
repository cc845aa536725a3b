"""Run configuration.

All tunable numbers live here as dataclass defaults and can be overridden
from a TOML or JSON file whose sections mirror the dataclass names, e.g.

    [exploration]
    w_gain = 1.0
    bias_frontier = 0.5

    [map]
    resolution = 0.05
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass
class MapConfig:
    resolution: float = 0.05
    hit_update: float = 0.85
    miss_update: float = -0.4
    clamp: float = 3.5
    occ_threshold: float = 0.0
    min_cluster_size: int = 5
    bounded_workspace: bool = True
    gain_rays_x: int = 32
    gain_rays_y: int = 24


@dataclass
class CameraConfig:
    width: int = 64
    height: int = 48
    fov_h_deg: float = 60.0
    fov_v_deg: float = 45.0
    max_range: float = 1.5
    noise_sigma: float = 0.0


@dataclass
class SensorConfig:
    buffer_size: int = 8
    min_area_px: float = 40.0


@dataclass
class IkConfig:
    damping: float = 1e-2
    step_clamp: float = 0.2
    max_iters: int = 200
    tol_pos: float = 1e-3
    tol_rot: float = 1e-2


@dataclass
class ExplorationConfig:
    w_gain: float = 1.0
    w_momentum: float = 0.3
    w_manip: float = 5.0
    w_heuristic: float = 0.5
    bias_frontier: float = 0.5
    bias_prior: float = 0.2
    sample_sigma: float = 0.1
    step_max: float = 0.15
    edge_resolution: float = 0.05
    node_budget: int = 60
    attempt_budget: int = 600
    cost_floor: float = 1e-3
    # near-field scan
    scan_candidates: int = 64
    scan_k_max: int = 6
    scan_min_gain: int = 25
    safety_box_half_xy: float = 0.45
    safety_box_z: float = 0.75


@dataclass
class MotionConfig:
    goal_bias: float = 0.2
    step: float = 0.2
    max_iters: int = 5000
    densify_resolution: float = 0.05
    shortcut_attempts: int = 100
    joint_speed: float = 0.5
    singularity_floor: float = 1e-4
    collision_margin: float = 0.01
    unknown_as_obstacle: bool = True


@dataclass
class GraspConfig:
    gripper_max_width: float = 0.08
    friction_half_angle_deg: float = 25.0
    approach_tolerance_deg: float = 30.0
    approach_radius: float = 0.25
    min_cloud_points: int = 20
    normal_neighbors: int = 8
    max_candidates: int = 64
    max_pair_points: int = 400
    finger_radius: float = 0.012
    finger_length: float = 0.05


@dataclass
class RunnerConfig:
    max_cycles: int = 60
    max_grasp_attempts: int = 3
    ig_candidates: int = 50
    fv_poses: int = 6
    near_field_scan: bool = True
    grasp_constraints: bool = True
    judge_margin: float = 0.002


@dataclass
class Config:
    robot_file: str = ""  # empty = packaged default 7-DOF arm
    map: MapConfig = field(default_factory=MapConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    ik: IkConfig = field(default_factory=IkConfig)
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    grasp: GraspConfig = field(default_factory=GraspConfig)
    runner: RunnerConfig = field(default_factory=RunnerConfig)


class ConfigError(ValueError):
    pass


def _apply(dc, values: dict, path: str):
    names = {f.name: f for f in dataclasses.fields(dc)}
    for key, val in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key '{path}{key}'")
        cur = getattr(dc, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise ConfigError(f"'{path}{key}' must be a table/object")
            _apply(cur, val, f"{path}{key}.")
        else:
            want = type(cur)
            if want is float and isinstance(val, int):
                val = float(val)
            if not isinstance(val, want):
                raise ConfigError(
                    f"'{path}{key}' expects {want.__name__}, got {type(val).__name__}")
            setattr(dc, key, val)


def load_config(path: str | Path | None) -> Config:
    """Config from a TOML/JSON file; defaults when path is None."""
    cfg = Config()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        values = json.loads(path.read_text())
    else:
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
    _apply(cfg, values, "")
    return cfg
