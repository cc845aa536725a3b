"""Tri-state occupancy voxel map.

Every voxel is in exactly one of three states: unknown until first touched
by a ray or carve, then free or occupied by the sign of its clamped
log-odds value. Observation is monotone: a voxel never becomes unknown
again.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels
from .config import MapConfig
from .kinematics import Capsule, Viewpoint, capsule_arrays

UNKNOWN, FREE, OCCUPIED = 0, 1, 2

_CONN26 = np.ones((3, 3, 3), dtype=int)


@dataclass(frozen=True)
class FrontierCluster:
    voxel_ids: np.ndarray  # flat ids, sorted
    centroid: np.ndarray   # meters
    size: int


class VoxelMap:
    def __init__(self, origin, dims, params: MapConfig | None = None):
        self.params = params or MapConfig()
        self.origin = np.asarray(origin, dtype=float)
        self.dims = np.asarray(dims, dtype=np.int64)
        if np.any(self.dims <= 0):
            raise ValueError("map dims must be positive")
        n = int(np.prod(self.dims))
        self.log_odds = np.zeros(n, dtype=np.float64)
        self.observed = np.zeros(n, dtype=np.uint8)
        self._state = None

    @classmethod
    def from_aabb(cls, lo, hi, params: MapConfig | None = None) -> "VoxelMap":
        params = params or MapConfig()
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        dims = np.maximum(np.ceil((hi - lo) / params.resolution - 1e-9), 1).astype(np.int64)
        return cls(lo, dims, params)

    # -- basic queries ------------------------------------------------------

    @property
    def resolution(self) -> float:
        return self.params.resolution

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def copy(self) -> "VoxelMap":
        out = VoxelMap(self.origin, self.dims, self.params)
        out.log_odds = self.log_odds.copy()
        out.observed = self.observed.copy()
        return out

    def state(self) -> np.ndarray:
        """Flat int8 tri-state array (0 unknown, 1 free, 2 occupied)."""
        if self._state is None:
            s = np.where(self.log_odds >= self.params.occ_threshold, OCCUPIED, FREE)
            s = np.where(self.observed == 0, UNKNOWN, s)
            self._state = s.astype(np.int8)
        return self._state

    def state_grid(self) -> np.ndarray:
        return self.state().reshape(tuple(self.dims))

    def unknown_count(self) -> int:
        return int(np.count_nonzero(self.state() == UNKNOWN))

    def voxel_index(self, point) -> tuple[int, int, int] | None:
        idx = np.floor((np.asarray(point) - self.origin) / self.resolution).astype(int)
        if np.any(idx < 0) or np.any(idx >= self.dims):
            return None
        return tuple(idx)

    def flat_id(self, ijk) -> int:
        i, j, k = ijk
        return int((i * self.dims[1] + j) * self.dims[2] + k)

    def voxel_center(self, flat: int) -> np.ndarray:
        k = flat % self.dims[2]
        j = (flat // self.dims[2]) % self.dims[1]
        i = flat // (self.dims[1] * self.dims[2])
        return self.origin + (np.array([i, j, k], dtype=float) + 0.5) * self.resolution

    def voxel_centers(self, flats: np.ndarray) -> np.ndarray:
        flats = np.asarray(flats)
        k = flats % self.dims[2]
        j = (flats // self.dims[2]) % self.dims[1]
        i = flats // (self.dims[1] * self.dims[2])
        return self.origin + (np.stack([i, j, k], axis=-1) + 0.5) * self.resolution

    def state_at(self, point) -> int:
        idx = self.voxel_index(point)
        if idx is None:
            return UNKNOWN
        return int(self.state()[self.flat_id(idx)])

    def _dirty(self):
        self._state = None

    # -- mutation -----------------------------------------------------------

    def integrate_depth(self, vp: Viewpoint, depth) -> None:
        """Fuse one depth image with per-ray DDA log-odds updates.

        Voxels strictly before a hit get the miss update, the hit voxel the
        hit update; no-return rays clear space out to max range. Rays
        leaving the map are clipped. Every traversed voxel becomes observed.
        """
        dirs = depth.ray_directions_world(vp)
        p = self.params
        _kernels.integrate_rays(self.log_odds, self.observed,
                                self.origin, self.resolution, self.dims,
                                np.ascontiguousarray(vp.position, dtype=float),
                                dirs, np.ascontiguousarray(depth.ranges.ravel(), dtype=float),
                                float(depth.max_range),
                                p.hit_update, p.miss_update, p.clamp)
        self._dirty()

    def filter_robot_body(self, capsules: list[Capsule]) -> None:
        """Reset occupied voxels inside the (inflated) body capsules to
        free. Only occupied voxels change; observed flags are untouched."""
        if not capsules:
            return
        p0, p1, r = capsule_arrays(capsules)
        _kernels.carve_capsules(self.log_odds, self.observed,
                                self.origin, self.resolution, self.dims,
                                p0, p1, r, self.resolution / 2.0,
                                -self.params.clamp, 1, self.params.occ_threshold)
        self._dirty()

    def mark_free_capsules(self, capsules: list[Capsule], inflate: float = 0.0,
                           only_unknown: bool = True) -> None:
        """Carve capsules as observed free space.

        With only_unknown (the default) occupied voxels survive, so clearing
        body-swept space can never erase a mapped obstacle."""
        if not capsules:
            return
        p0, p1, r = capsule_arrays(capsules)
        _kernels.carve_capsules(self.log_odds, self.observed,
                                self.origin, self.resolution, self.dims,
                                p0, p1, r, inflate,
                                -self.params.clamp, 2 if only_unknown else 0,
                                self.params.occ_threshold)
        self._dirty()

    # -- frontiers ----------------------------------------------------------

    def detect_frontiers(self) -> np.ndarray:
        """Flat ids of free voxels with an unknown 6-neighbor, sorted.

        With bounded_workspace (default) the map border is not
        frontier-inducing; otherwise out-of-bounds counts as unknown.
        """
        grid = self.state_grid()
        free = grid == FREE
        unk = grid == UNKNOWN
        fill = not self.params.bounded_workspace
        near_unknown = np.zeros_like(free)
        for axis in range(3):
            for sign in (1, -1):
                shifted = np.full_like(unk, fill)
                src = [slice(None)] * 3
                dst = [slice(None)] * 3
                if sign > 0:
                    src[axis] = slice(1, None)
                    dst[axis] = slice(None, -1)
                else:
                    src[axis] = slice(None, -1)
                    dst[axis] = slice(1, None)
                shifted[tuple(dst)] = unk[tuple(src)]
                near_unknown |= shifted
        return np.flatnonzero((free & near_unknown).ravel())

    def cluster_frontiers(self, voxel_ids: np.ndarray) -> list[FrontierCluster]:
        """Group frontier voxels into 26-connected components, dropping
        components below min_cluster_size."""
        voxel_ids = np.asarray(voxel_ids, dtype=np.int64)
        if voxel_ids.size == 0:
            return []
        mask = np.zeros(self.size, dtype=bool)
        mask[voxel_ids] = True
        labels, count = ndimage.label(mask.reshape(tuple(self.dims)), structure=_CONN26)
        flat_labels = labels.ravel()[voxel_ids]
        clusters = []
        for lbl in range(1, count + 1):
            members = voxel_ids[flat_labels == lbl]
            if members.size < self.params.min_cluster_size:
                continue
            centers = self.voxel_centers(members)
            clusters.append(FrontierCluster(np.sort(members),
                                            centers.mean(axis=0), int(members.size)))
        clusters.sort(key=lambda c: int(c.voxel_ids[0]))
        return clusters

    # -- visibility / collision queries --------------------------------------

    def gain_ray_directions(self, vp: Viewpoint, fov: tuple[float, float],
                            rays: tuple[int, int]) -> np.ndarray:
        """World directions of the fixed angular lattice used for
        information gain (pinhole pixel-center convention)."""
        nx, ny = rays
        ax = (np.arange(nx) + 0.5) / nx - 0.5
        ay = (np.arange(ny) + 0.5) / ny - 0.5
        tx = np.tan(ax * fov[0])
        ty = np.tan(ay * fov[1])
        gx, gy = np.meshgrid(tx, ty, indexing="ij")
        d = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.ascontiguousarray(d @ vp.rotation.T)

    def count_unknown_visible(self, vp: Viewpoint, fov: tuple[float, float],
                              max_range: float,
                              rays: tuple[int, int] | None = None) -> int:
        """Distinct unknown voxels visible from vp through the ray lattice,
        stopping each ray at the first occupied voxel."""
        if fov[0] <= 0 or fov[1] <= 0 or max_range <= 0:
            raise ValueError("fov and max_range must be positive")
        if rays is None:
            rays = (self.params.gain_rays_x, self.params.gain_rays_y)
        dirs = self.gain_ray_directions(vp, fov, rays)
        return int(_kernels.count_unknown_along_rays(
            self.state(), self.origin, self.resolution, self.dims,
            np.ascontiguousarray(vp.position, dtype=float), dirs, max_range))

    def is_region_free(self, capsule: Capsule, unknown_as_obstacle: bool = False,
                       inflate: float | None = None) -> bool:
        """True iff no voxel center inside the inflated capsule is occupied
        (nor unknown, when unknown_as_obstacle)."""
        return not self.capsules_blocked([capsule], unknown_as_obstacle, inflate)

    def capsules_blocked(self, capsules: list[Capsule],
                         unknown_as_obstacle: bool = False,
                         inflate: float | None = None) -> bool:
        if inflate is None:
            inflate = self.resolution / 2.0
        p0, p1, r = capsule_arrays(capsules)
        return bool(_kernels.capsules_blocked(
            self.state(), self.origin, self.resolution, self.dims,
            p0, p1, r, inflate, unknown_as_obstacle))

    def observed_fraction_in_aabb(self, lo, hi) -> float:
        """Fraction of voxel centers inside [lo, hi] that are observed."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        i0 = np.maximum(np.floor((lo - self.origin) / self.resolution - 0.5).astype(int) + 1, 0)
        i1 = np.minimum(np.floor((hi - self.origin) / self.resolution - 0.5).astype(int),
                        self.dims - 1)
        if np.any(i1 < i0):
            return 0.0
        grid = self.observed.reshape(tuple(self.dims))
        block = grid[i0[0]:i1[0] + 1, i0[1]:i1[1] + 1, i0[2]:i1[2] + 1]
        return float(np.count_nonzero(block)) / block.size

    # -- snapshot export ------------------------------------------------------

    def snapshot(self) -> dict:
        """Debug dump: run-length-encoded tri-state array, C-order."""
        s = self.state()
        edges = np.flatnonzero(np.diff(s)) + 1
        starts = np.concatenate([[0], edges])
        ends = np.concatenate([edges, [s.size]])
        runs = [[int(e - b), int(s[b])] for b, e in zip(starts, ends)]
        return {"origin": list(map(float, self.origin)),
                "resolution": self.resolution,
                "dims": list(map(int, self.dims)),
                "states": runs}

    def save_snapshot(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.snapshot(), sort_keys=True))

    @classmethod
    def from_snapshot(cls, data: dict, params: MapConfig | None = None) -> "VoxelMap":
        params = params or MapConfig()
        params.resolution = float(data["resolution"])
        m = cls(data["origin"], data["dims"], params)
        pos = 0
        for count, state in data["states"]:
            if state != UNKNOWN:
                m.observed[pos:pos + count] = 1
                m.log_odds[pos:pos + count] = (
                    params.clamp if state == OCCUPIED else -params.clamp)
            pos += count
        if pos != m.size:
            raise ValueError("snapshot run lengths do not cover the map")
        m._dirty()
        return m
