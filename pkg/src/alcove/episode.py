"""Episode loop: a finite state machine sequencing near-field scan,
exploration, detection, grasp generation, and execution, with the three
baseline exploration strategies and pure-from-log metric computation.

Methods
-------
proposed  near-field wrist scan, then the biased viewpoint tree with the
          full utility (gain, momentum, manipulability, heuristic) / cost
gse       the same tree, utility reduced to gain/cost, no near-field scan
ig        greedy: 50 sampled viewpoints per cycle, pick max gain, no tree
fv        a fixed forward arc of viewpoints executed open loop

Simulated time advances only with executed trajectory duration (uniform
joint speed); planning costs cycles, not seconds. Every executed motion is
judged against ground truth geometry: a real collision fails the episode.
All randomness derives from the episode seed, so a (scene, method, seed)
triple reproduces its run log byte for byte.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .config import Config
from .exploration import (ExplorationTree, UtilityWeights, evaluate_tree,
                          expand_tree, make_root, plan_near_field_scan,
                          select_nbv)
from .grasping import (ApproachEstimationError, InsufficientObservation,
                       approach_angle, estimate_approach_dir,
                       extract_target_cloud, finger_clearance_capsules,
                       grasp_pose_quality, inverse_kinematics, mirror_cloud,
                       sample_candidates, select_grasp)
from .kinematics import (RobotModel, Viewpoint, body_capsules, capsule_arrays,
                         forward_kinematics, load_robot, manipulability)
from .motion import (Trajectory, config_in_collision, densify, densify_path,
                     make_trajectory, plan_path)
from .scenes import Box, Scene, boxes_overlap
from .sensing import (CameraModel, Observation, ObservationBuffer,
                      detect_target, render_depth, save_depth,
                      select_best_observation)
from .transforms import look_at_rotation, matrix_to_quat
from .voxelmap import VoxelMap

METHODS = ("proposed", "fv", "ig", "gse")

PHASES = ("Init", "NearFieldScan", "Explore", "Detected", "GraspGen",
          "Execute", "Done", "Failed")

_LEGAL = {("Init", "NearFieldScan"), ("NearFieldScan", "Explore"),
          ("Explore", "Detected"), ("Detected", "GraspGen"),
          ("GraspGen", "Execute"), ("Execute", "Done"),
          ("GraspGen", "Explore")} | {(p, "Failed") for p in PHASES[:-2]}

READY_POSE_7DOF = np.array([0.0, -np.pi / 4, 0.0, -3 * np.pi / 4,
                            0.0, 3 * np.pi / 4, np.pi / 4])

BOOTSTRAP_INFLATE = 0.06


class FsmError(RuntimeError):
    """Illegal phase transition; indicates a runner bug."""


class MetricsError(ValueError):
    """Run log too incomplete to recompute metrics from."""


@dataclass
class EpisodeMetrics:
    tft: float
    pft: float
    mpsr: float
    am: float
    gpq: float
    success: bool
    coverage_curve: list[tuple[float, float]]
    detected: bool = False
    grasp_reached: bool = False
    grasp_success: bool = False


def ready_config(model: RobotModel) -> np.ndarray:
    """Start posture: the canonical 7-DOF ready pose, otherwise mid-limits."""
    if model.dof == len(READY_POSE_7DOF):
        return np.clip(READY_POSE_7DOF, model.limits[:, 0], model.limits[:, 1])
    return model.limits.mean(axis=1)


def fv_viewpoint_list(scene: Scene, count: int = 6) -> list[tuple[np.ndarray, np.ndarray]]:
    """The fixed-views arc: positions fanned in front of the container
    opening, all looking at the interior center."""
    opening = scene.container.opening_center
    look = scene.container.interior_center
    out = []
    angles = np.linspace(-0.85, 0.85, count)
    for i, ang in enumerate(angles):
        radius = 0.34 if i % 2 == 0 else 0.28
        offset = np.array([-radius * np.cos(ang), radius * np.sin(ang),
                           0.10 if i % 2 == 0 else 0.22])
        out.append((opening + offset, look))
    return out


# ---------------------------------------------------------------------------


class _GroundTruth:
    """Collision judge against the true scene geometry."""

    def __init__(self, scene: Scene, margin: float):
        self.margin = margin
        self._pack_all = self._pack(scene.all_boxes())
        self._pack_no_target = self._pack(scene.obstacle_boxes())

    @staticmethod
    def _pack(boxes: list[Box]):
        inv = np.ascontiguousarray(np.stack([b.rotation.T for b in boxes]))
        cen = np.stack([b.position for b in boxes])
        half = np.stack([b.half_extents for b in boxes])
        return inv, cen, half

    def capsules_collide(self, capsules, include_target: bool = True) -> bool:
        inv, cen, half = self._pack_all if include_target else self._pack_no_target
        p0, p1, r = capsule_arrays(capsules)
        return bool(_kernels.capsules_hit_boxes(p0, p1, r, inv, cen, half,
                                                self.margin))

    def trajectory_collides(self, model, traj: Trajectory,
                            include_target: bool = True) -> bool:
        caps = []
        for q in traj.waypoints:
            caps.extend(body_capsules(model, q))
        return self.capsules_collide(caps, include_target)


class Episode:
    def __init__(self, scene: Scene, method: str, config: Config, seed: int,
                 debug_dir: str | Path | None = None):
        method = method.lower()
        if method not in METHODS:
            raise ValueError(f"unknown method '{method}' (choose from {METHODS})")
        self.scene = scene
        self.method = method
        self.cfg = config
        self.seed = int(seed)
        self.debug_dir = Path(debug_dir) if debug_dir else None
        if self.debug_dir:
            self.debug_dir.mkdir(parents=True, exist_ok=True)

        self.model = load_robot(config.robot_file or None)
        self.camera = CameraModel.from_config(config.camera)
        self.fov = (np.deg2rad(config.camera.fov_h_deg),
                    np.deg2rad(config.camera.fov_v_deg))
        if method == "gse":
            self.weights = UtilityWeights(1.0, 0.0, 0.0, 0.0,
                                          config.exploration.bias_frontier,
                                          config.exploration.bias_prior)
        else:
            self.weights = UtilityWeights.from_config(config.exploration)
        self.vmap = VoxelMap.from_aabb(scene.workspace_lo, scene.workspace_hi,
                                       config.map)
        self.judge = _GroundTruth(scene, config.runner.judge_margin)
        self.buffer = ObservationBuffer(cfg=config.sensor)

        self.q = ready_config(self.model)
        self.t = 0.0
        self.cycle = 0
        self.phase = "Init"
        self.events: list[dict] = []
        self.prev_selected: np.ndarray | None = None
        self.grasp_attempts = 0
        self.stalled_cycles = 0
        self.finished = False
        self.success = False
        self.reason = ""
        self._sense_count = 0
        self._suppress_detect = 0

        self.rng_scan = np.random.default_rng([self.seed, 1])
        self.rng_tree = np.random.default_rng([self.seed, 2])
        self.rng_plan = np.random.default_rng([self.seed, 3])
        self.rng_ig = np.random.default_rng([self.seed, 4])

    # -- log helpers ---------------------------------------------------------

    def _emit(self, record: dict) -> None:
        self.events.append(record)

    def _transition(self, to: str) -> None:
        if (self.phase, to) not in _LEGAL:
            raise FsmError(f"illegal transition {self.phase} -> {to}")
        self._emit({"type": "phase", "t": self.t, "from": self.phase, "to": to})
        self.phase = to

    def _fail(self, reason: str) -> None:
        self._transition("Failed")
        self.finished = True
        self.reason = reason

    def _finish_success(self) -> None:
        self._transition("Done")
        self.finished = True
        self.success = True
        self.reason = "grasped"

    # -- sensing -------------------------------------------------------------

    def _sense(self) -> Observation:
        vp = forward_kinematics(self.model, self.q).camera
        img = render_depth(self.scene, vp, self.camera, timestamp=self.t)
        self.vmap.integrate_depth(vp, img)
        self.vmap.filter_robot_body(body_capsules(self.model, self.q))
        detected, bbox = detect_target(self.scene, img, vp,
                                       self.cfg.sensor.min_area_px)
        obs = Observation(img, vp, detected, bbox)
        self.buffer.push(obs)
        lo, hi = self.scene.target.aabb()
        cov = self.vmap.observed_fraction_in_aabb(lo, hi)
        self._emit({"type": "sense", "t": self.t,
                    "campos": [float(x) for x in vp.position],
                    "detected": detected, "coverage": cov})
        if self.debug_dir:
            save_depth(img, self.debug_dir / f"depth_{self._sense_count:04d}.bin")
        self._sense_count += 1
        return obs

    def _buffer_detection(self):
        hits = [o for o in self.buffer.entries if o.detected]
        if not hits:
            return None
        self._emit({"type": "detect", "t": self.t})
        return hits

    # -- motion --------------------------------------------------------------

    def _plan(self, q_goal, kind: str,
              unknown_as_obstacle: bool | None = None) -> Trajectory | None:
        traj = plan_path(self.model, self.q, q_goal, self.vmap,
                         self.cfg.motion, self.rng_plan, unknown_as_obstacle)
        self._emit({"type": "plan", "t": self.t, "kind": kind,
                    "ok": traj is not None})
        return traj

    def _execute(self, traj: Trajectory, kind: str,
                 include_target: bool = True) -> bool:
        """Advance time along the trajectory; truncates at the time limit
        and fails on a ground-truth collision. Returns True when fully
        executed."""
        limit = self.scene.time_limit_s
        frac = 1.0
        duration = traj.duration
        if duration > 0 and self.t + duration > limit:
            frac = (limit - self.t) / duration
        n = len(traj.waypoints)
        n_exec = max(int(np.ceil(n * frac)), 1)
        wps = traj.waypoints[:n_exec]
        ee, manip = [], []
        for q in wps:
            fk = forward_kinematics(self.model, q)
            ee.append([float(x) for x in fk.ee_pose[:3, 3]])
            manip.append(manipulability(self.model, q))
        t0 = self.t
        self.t = min(self.t + duration, limit) if duration > 0 else self.t
        self._emit({"type": "execute", "t0": t0, "t1": self.t, "kind": kind,
                    "ee_path": ee, "manip": manip,
                    "joint_length": traj.length * frac})
        sub = make_trajectory(wps, self.cfg.motion)
        if self.judge.trajectory_collides(self.model, sub, include_target):
            self._emit({"type": "collision", "t": self.t, "kind": kind})
            self._fail("ground-truth collision during " + kind)
            return False
        # proprioceptive clearing: the body verifiably swept this volume
        caps = []
        for q in wps[::2]:
            caps.extend(body_capsules(self.model, q))
        caps.extend(body_capsules(self.model, wps[-1]))
        self.vmap.mark_free_capsules(caps, inflate=0.01)
        self.q = np.asarray(wps[-1], float)
        if frac < 1.0:
            self._fail("timeout")
            return False
        return True

    # -- phases --------------------------------------------------------------

    def run(self) -> dict:
        if self.scene.time_limit_s <= 0:
            self._transition("NearFieldScan")
            self._fail("timeout")
            return self._log()
        self.vmap.mark_free_capsules(body_capsules(self.model, self.q),
                                     inflate=BOOTSTRAP_INFLATE)
        self._transition("NearFieldScan")
        if not self.finished:
            self._near_field_scan()
        while not self.finished:
            if self.phase == "Explore":
                self._explore_cycle()
            elif self.phase == "Detected":
                self._detected()
            elif self.phase == "GraspGen":
                self._grasp_gen()
        return self._log()

    def _near_field_scan(self) -> None:
        run_scan = (self.method == "proposed" and self.cfg.runner.near_field_scan)
        if run_scan:
            self._sense()
            ecfg = self.cfg.exploration
            base = self.scene.robot_base[:3, 3]
            lo = base + np.array([-ecfg.safety_box_half_xy,
                                  -ecfg.safety_box_half_xy, -0.05])
            hi = base + np.array([ecfg.safety_box_half_xy,
                                  ecfg.safety_box_half_xy, ecfg.safety_box_z])
            waypoints = plan_near_field_scan(
                self.model, self.q, (lo, hi), self.vmap, self.fov,
                self.camera.max_range, self.rng_scan,
                candidates=ecfg.scan_candidates, k_max=ecfg.scan_k_max,
                min_gain=ecfg.scan_min_gain)
            for wp in waypoints:
                wps = densify(self.q, wp, self.cfg.motion.densify_resolution)
                # skip wrist moves that would sweep known-occupied space
                if any(self.vmap.capsules_blocked(body_capsules(self.model, q),
                                                  unknown_as_obstacle=False)
                       for q in wps):
                    continue
                if not self._execute(make_trajectory(wps, self.cfg.motion), "scan"):
                    return
                self._sense()
        if not self.finished:
            self._transition("Explore")

    def _explore_cycle(self) -> None:
        if self.t >= self.scene.time_limit_s:
            self._fail("timeout")
            return
        if self.cycle >= self.cfg.runner.max_cycles:
            self._fail("cycle budget exhausted")
            return
        self.cycle += 1
        self._sense()
        if self._suppress_detect > 0:
            # a failed grasp attempt sent us back: move before re-detecting
            self._suppress_detect -= 1
        elif self._buffer_detection():
            self._transition("Detected")
            return
        ids = self.vmap.detect_frontiers()
        clusters = self.vmap.cluster_frontiers(ids)

        moved = False
        if self.method in ("proposed", "gse"):
            moved = self._step_tree(clusters)
        elif self.method == "ig":
            moved = self._step_ig(clusters)
        elif self.method == "fv":
            moved = self._step_fv()
        if self.finished:
            return
        self.stalled_cycles = 0 if moved else self.stalled_cycles + 1
        if self.stalled_cycles > 10:
            self._fail("exploration exhausted")
        elif not clusters and not moved:
            self._fail("exploration exhausted")

    def _step_tree(self, clusters) -> bool:
        ecfg = self.cfg.exploration
        root = make_root(self.model, self.q, ecfg)
        priors = self.scene.heuristic_points
        workspace = (self.scene.workspace_lo, self.scene.workspace_hi)
        tree = expand_tree(self.vmap, self.model, root, clusters, priors,
                           self.weights, ecfg.node_budget, workspace,
                           ecfg, self.cfg.ik, self.cfg.motion, self.rng_tree)
        if len(tree.nodes) == 1:   # replan once with a larger budget
            tree = expand_tree(self.vmap, self.model, root, clusters, priors,
                               self.weights, ecfg.node_budget * 2, workspace,
                               ecfg, self.cfg.ik, self.cfg.motion, self.rng_tree,
                               attempt_budget=ecfg.attempt_budget * 2)
        evaluate_tree(tree, self.vmap, self.weights, self.fov,
                      self.camera.max_range, priors,
                      self.prev_selected, self.model,
                      rays=(self.cfg.map.gain_rays_x, self.cfg.map.gain_rays_y))
        nbv = select_nbv(tree)
        if self.debug_dir:
            self._dump_tree(tree)
        if nbv is None:
            return False
        traj = self._plan(nbv.config, "nbv")
        if traj is None:
            # fall back to the validated tree path so a planner miss does
            # not strand the cycle
            path = tree.joint_path(nbv)
            traj = make_trajectory(densify_path(list(path),
                                                self.cfg.motion.densify_resolution),
                                   self.cfg.motion)
        if not self._execute(traj, "explore"):
            return False
        self.prev_selected = nbv.viewpoint.position.copy()
        return True

    def _step_ig(self, clusters) -> bool:
        center = (self.scene.workspace_lo + self.scene.workspace_hi) / 2
        cands = []
        for _ in range(self.cfg.runner.ig_candidates):
            pos = self.rng_ig.uniform(self.scene.workspace_lo,
                                      self.scene.workspace_hi)
            if clusters:
                ds = [np.linalg.norm(c.centroid - pos) for c in clusters]
                look = clusters[int(np.argmin(ds))].centroid
            else:
                look = center
            R = look_at_rotation(pos, look)
            vp = Viewpoint(pos, R)
            g = self.vmap.count_unknown_visible(
                vp, self.fov, self.camera.max_range,
                (self.cfg.map.gain_rays_x, self.cfg.map.gain_rays_y))
            cands.append((g, pos, look))
        cands.sort(key=lambda c: -c[0])
        for g, pos, look in cands[:8]:
            target = np.eye(4)
            target[:3, :3] = look_at_rotation(pos, look)
            target[:3, 3] = pos
            q = inverse_kinematics(self.model, target, self.q, self.cfg.ik,
                                   frame="camera")
            if q is None:
                continue
            if config_in_collision(self.model, q, self.vmap, self.cfg.motion):
                continue
            traj = self._plan(q, "ig")
            if traj is None:
                continue
            if not self._execute(traj, "explore"):
                return False
            return True
        return False

    def _step_fv(self) -> bool:
        poses = fv_viewpoint_list(self.scene, self.cfg.runner.fv_poses)
        idx = self.cycle - 1
        if idx >= len(poses):
            self._fail("fixed view sequence exhausted")
            return False
        pos, look = poses[idx]
        target = np.eye(4)
        target[:3, :3] = look_at_rotation(pos, look)
        target[:3, 3] = pos
        q = inverse_kinematics(self.model, target, self.q, self.cfg.ik,
                               frame="camera")
        if q is None:
            return False
        traj = make_trajectory(densify(self.q, q,
                                       self.cfg.motion.densify_resolution),
                               self.cfg.motion)
        return self._execute(traj, "explore")

    def _detected(self) -> None:
        best = select_best_observation(self.buffer)
        self.best_obs = best
        self._transition("GraspGen")

    def _grasp_gen(self) -> None:
        self.grasp_attempts += 1
        gcfg = self.cfg.grasp
        centroid = self.scene.target.position
        try:
            cloud = extract_target_cloud(self.best_obs.image,
                                         self.best_obs.viewpoint,
                                         self.best_obs.bbox, gcfg)
            full = mirror_cloud(cloud, centroid)
            candidates = sample_candidates(full, gcfg.max_candidates, gcfg)
            if not candidates:
                raise InsufficientObservation("no antipodal candidates")
            n = estimate_approach_dir(self.vmap, centroid, gcfg.approach_radius,
                                      fallback_axis=self.best_obs.viewpoint.viewing_axis)
        except (InsufficientObservation, ApproachEstimationError) as e:
            self._emit({"type": "grasp_skip", "t": self.t, "reason": str(e)})
            self._resume_exploration()
            return

        if self.cfg.runner.grasp_constraints:
            result, attempts, successes = select_grasp(
                candidates, self.model, self.q, self.vmap, n,
                gcfg.approach_tolerance_deg, self.seed, gcfg,
                self.cfg.ik, self.cfg.motion)
            for k in range(attempts):
                self._emit({"type": "plan", "t": self.t, "kind": "grasp",
                            "ok": k < successes})
            if result is None:
                self._emit({"type": "grasp_skip", "t": self.t,
                            "reason": "no feasible constrained grasp"})
                self._resume_exploration()
                return
            cand, traj, q_grasp = result
        else:
            cand = max(candidates, key=lambda c: c.score)
            q_grasp = inverse_kinematics(self.model, cand.pose, self.q,
                                         self.cfg.ik)
            if q_grasp is None:
                self._emit({"type": "grasp_skip", "t": self.t,
                            "reason": "ik infeasible"})
                self._resume_exploration()
                return
            traj = make_trajectory(densify(self.q, q_grasp,
                                           self.cfg.motion.densify_resolution),
                                   self.cfg.motion)

        gpq = grasp_pose_quality(cand, True, n)
        self._emit({"type": "grasp_selected", "t": self.t,
                    "score": cand.score, "width": cand.width, "gpq": gpq,
                    "angle_deg": float(np.rad2deg(approach_angle(cand, n))),
                    "center": [float(x) for x in cand.center]})
        self._transition("Execute")
        if not self._execute(traj, "grasp approach", include_target=False):
            return
        self._finish_grasp(cand)

    def _resume_exploration(self) -> None:
        if self.grasp_attempts >= self.cfg.runner.max_grasp_attempts:
            self._fail("grasp generation exhausted")
            return
        self.buffer.clear()
        self._suppress_detect = 1
        self._transition("Explore")

    def _finish_grasp(self, cand) -> None:
        closing = Box("closing_region",
                      cand.center - cand.approach_axis * (self.cfg.grasp.finger_length / 2),
                      matrix_to_quat(cand.pose[:3, :3]),
                      (cand.width / 2, 0.012, self.cfg.grasp.finger_length / 2))
        hits_target = boxes_overlap(closing, self.scene.target)
        flanks = finger_clearance_capsules(cand, self.cfg.grasp)
        flank_hit = self.judge.capsules_collide(flanks, include_target=True)
        ok = hits_target and not flank_hit
        self._emit({"type": "grasp_outcome", "t": self.t, "success": ok,
                    "reason": "grasped" if ok else
                    ("finger collision" if flank_hit else "closing region misses target")})
        if ok:
            self._finish_success()
        else:
            self._fail("grasp missed" if not hits_target else "finger collision")

    def _dump_tree(self, tree: ExplorationTree) -> None:
        path = self.debug_dir / "trees.jsonl"
        rec = {"cycle": self.cycle, "t": self.t,
               "nodes": [{"id": n.node_id, "parent": n.parent,
                          "pos": [float(x) for x in n.viewpoint.position],
                          "gain": n.gain, "momentum": n.momentum,
                          "manip": n.manip, "heuristic": n.heuristic,
                          "cost": n.cost, "utility": n.utility}
                         for n in tree.nodes],
               "attempts": tree.attempts}
        with open(path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def _log(self) -> dict:
        return {"version": 1, "method": self.method, "seed": self.seed,
                "scene": {"level": self.scene.level, "seed": self.scene.seed},
                "time_limit": self.scene.time_limit_s,
                "events": self.events,
                "final": {"phase": self.phase, "success": self.success,
                          "reason": self.reason, "sim_time": self.t,
                          "cycles": self.cycle}}


def run_episode(scene: Scene, method: str, config: Config, seed: int,
                debug_dir: str | Path | None = None) -> tuple[EpisodeMetrics, dict]:
    """Run one episode and return (metrics, run log). The log alone is
    sufficient to recompute the metrics (see compute_metrics)."""
    ep = Episode(scene, method, config, seed, debug_dir)
    log = ep.run()
    return compute_metrics(log), log


def compute_metrics(log: dict) -> EpisodeMetrics:
    """Metrics recomputed purely from a run log.

    tft falls back to the time limit when the target was never found
    (timeout convention); mpsr with zero planning attempts reports 0; am
    averages manipulability over every executed waypoint; pft integrates
    end-effector displacement over trajectories executed before first
    detection.
    """
    if "events" not in log or "final" not in log:
        raise MetricsError("run log is truncated: missing events/final")
    events = log["events"]
    limit = float(log["time_limit"])

    detect_t = None
    for e in events:
        if e["type"] == "detect":
            detect_t = float(e["t"])
            break
    tft = detect_t if detect_t is not None else limit

    pft = 0.0
    manips = []
    for e in events:
        if e["type"] != "execute":
            continue
        manips.extend(e["manip"])
        if detect_t is None or e["t1"] <= detect_t + 1e-12:
            path = np.asarray(e["ee_path"], dtype=float)
            if len(path) > 1:
                pft += float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))

    plans = [e for e in events if e["type"] == "plan"]
    mpsr = (sum(1 for e in plans if e["ok"]) / len(plans)) if plans else 0.0
    am = float(np.mean(manips)) if manips else 0.0

    gpq = 0.0
    for e in events:
        if e["type"] == "grasp_selected":
            gpq = float(e["gpq"])
    coverage = [(float(e["t"]), float(e["coverage"]))
                for e in events if e["type"] == "sense"]
    phases = {e["to"] for e in events if e["type"] == "phase"}
    grasp_outcome = [e for e in events if e["type"] == "grasp_outcome"]
    return EpisodeMetrics(
        tft=min(tft, limit), pft=pft, mpsr=mpsr, am=am, gpq=gpq,
        success=bool(log["final"]["success"]),
        coverage_curve=coverage,
        detected=detect_t is not None,
        grasp_reached="GraspGen" in phases,
        grasp_success=bool(grasp_outcome and grasp_outcome[-1]["success"]))
