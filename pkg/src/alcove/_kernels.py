"""Numba kernels for the hot loops: kinematic chains, voxel raycasting,
capsule collision queries, and ray-box intersection.

Everything here is a pure function of its arguments. Voxel state encoding:
0 = unknown, 1 = free, 2 = occupied, flat C-order with index
(ix * ny + iy) * nz + iz.
"""

import numba as nb
import numpy as np

F8 = nb.float64


@nb.njit(cache=True)
def chain_transforms(origins, axes, q):
    """Per-link world transforms of a revolute serial chain.

    origins: (d,4,4) fixed transform preceding each joint,
    axes: (d,3) unit rotation axes in the local joint frame,
    q: (d,) joint angles. Returns (d,4,4).
    """
    d = q.shape[0]
    out = np.empty((d, 4, 4))
    T = np.eye(4)
    for i in range(d):
        T = T @ origins[i]
        x, y, z = axes[i, 0], axes[i, 1], axes[i, 2]
        c = np.cos(q[i])
        s = np.sin(q[i])
        C = 1.0 - c
        R = np.empty((4, 4))
        R[0, 0] = c + x * x * C
        R[0, 1] = x * y * C - z * s
        R[0, 2] = x * z * C + y * s
        R[1, 0] = y * x * C + z * s
        R[1, 1] = c + y * y * C
        R[1, 2] = y * z * C - x * s
        R[2, 0] = z * x * C - y * s
        R[2, 1] = z * y * C + x * s
        R[2, 2] = c + z * z * C
        R[0, 3] = 0.0
        R[1, 3] = 0.0
        R[2, 3] = 0.0
        R[3, 0] = 0.0
        R[3, 1] = 0.0
        R[3, 2] = 0.0
        R[3, 3] = 1.0
        T = T @ R
        out[i] = T
    return out


@nb.njit(cache=True)
def geometric_jacobian(link_tfs, axes, ref_point):
    """6xd Jacobian (linear rows first) at a world reference point."""
    d = link_tfs.shape[0]
    J = np.zeros((6, d))
    for i in range(d):
        zx = (link_tfs[i, 0, 0] * axes[i, 0] + link_tfs[i, 0, 1] * axes[i, 1]
              + link_tfs[i, 0, 2] * axes[i, 2])
        zy = (link_tfs[i, 1, 0] * axes[i, 0] + link_tfs[i, 1, 1] * axes[i, 1]
              + link_tfs[i, 1, 2] * axes[i, 2])
        zz = (link_tfs[i, 2, 0] * axes[i, 0] + link_tfs[i, 2, 1] * axes[i, 1]
              + link_tfs[i, 2, 2] * axes[i, 2])
        rx = ref_point[0] - link_tfs[i, 0, 3]
        ry = ref_point[1] - link_tfs[i, 1, 3]
        rz = ref_point[2] - link_tfs[i, 2, 3]
        J[0, i] = zy * rz - zz * ry
        J[1, i] = zz * rx - zx * rz
        J[2, i] = zx * ry - zy * rx
        J[3, i] = zx
        J[4, i] = zy
        J[5, i] = zz
    return J


@nb.njit(cache=True)
def _rotation_log(R):
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    cos_a = (tr - 1.0) / 2.0
    if cos_a > 1.0:
        cos_a = 1.0
    if cos_a < -1.0:
        cos_a = -1.0
    angle = np.arccos(cos_a)
    out = np.zeros(3)
    if angle < 1e-12:
        return out
    if np.pi - angle < 1e-6:
        ax = np.sqrt(max((R[0, 0] + 1.0) / 2.0, 0.0))
        ay = np.sqrt(max((R[1, 1] + 1.0) / 2.0, 0.0))
        az = np.sqrt(max((R[2, 2] + 1.0) / 2.0, 0.0))
        if ax > 1e-6:
            if R[0, 1] < 0:
                ay = -ay
            if R[0, 2] < 0:
                az = -az
        elif ay > 1e-6:
            if R[1, 2] < 0:
                az = -az
        n = np.sqrt(ax * ax + ay * ay + az * az)
        out[0] = ax / n * angle
        out[1] = ay / n * angle
        out[2] = az / n * angle
        return out
    f = angle / (2.0 * np.sin(angle))
    out[0] = (R[2, 1] - R[1, 2]) * f
    out[1] = (R[0, 2] - R[2, 0]) * f
    out[2] = (R[1, 0] - R[0, 1]) * f
    return out


@nb.njit(cache=True)
def dls_ik(origins, axes, lower, upper, offset, target, q0,
           damping, step_clamp, max_iters, tol_pos, tol_rot):
    """Damped least squares IK for frame `offset` of the last link.

    Returns (q, converged). The solution is clipped to joint limits at every
    step, so a converged result always respects them.
    """
    d = q0.shape[0]
    q = q0.copy()
    for i in range(d):
        if q[i] < lower[i]:
            q[i] = lower[i]
        if q[i] > upper[i]:
            q[i] = upper[i]
    lam2 = damping * damping
    for _ in range(max_iters):
        tfs = chain_transforms(origins, axes, q)
        cur = tfs[d - 1] @ offset
        e = np.empty(6)
        e[0] = target[0, 3] - cur[0, 3]
        e[1] = target[1, 3] - cur[1, 3]
        e[2] = target[2, 3] - cur[2, 3]
        Rerr = target[:3, :3] @ cur[:3, :3].T
        w = _rotation_log(Rerr)
        e[3] = w[0]
        e[4] = w[1]
        e[5] = w[2]
        pos_err = np.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
        rot_err = np.sqrt(e[3] * e[3] + e[4] * e[4] + e[5] * e[5])
        if pos_err <= tol_pos and rot_err <= tol_rot:
            return q, True
        J = geometric_jacobian(tfs, axes, cur[:3, 3])
        A = J @ J.T
        for k in range(6):
            A[k, k] += lam2
        y = np.linalg.solve(A, e)
        dq = J.T @ y
        n = np.sqrt(np.sum(dq * dq))
        if n > step_clamp:
            dq = dq * (step_clamp / n)
        for i in range(d):
            q[i] += dq[i]
            if q[i] < lower[i]:
                q[i] = lower[i]
            if q[i] > upper[i]:
                q[i] = upper[i]
    # final check after the last step
    tfs = chain_transforms(origins, axes, q)
    cur = tfs[d - 1] @ offset
    ex = target[0, 3] - cur[0, 3]
    ey = target[1, 3] - cur[1, 3]
    ez = target[2, 3] - cur[2, 3]
    w = _rotation_log(target[:3, :3] @ cur[:3, :3].T)
    pos_err = np.sqrt(ex * ex + ey * ey + ez * ez)
    rot_err = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    return q, (pos_err <= tol_pos) and (rot_err <= tol_rot)


# ---------------------------------------------------------------------------
# voxel traversal


@nb.njit(cache=True, inline="always")
def _flat(ix, iy, iz, ny, nz):
    return (ix * ny + iy) * nz + iz


@nb.njit(cache=True)
def integrate_rays(log_odds, observed, map_origin, res, dims,
                   origin, dirs, ranges, max_range,
                   hit_update, miss_update, clamp):
    """Apply one depth scan to the map with exact 3D DDA traversal.

    Each voxel is updated at most once per scan: voxels passed through get
    the miss update, voxels containing a ray endpoint get the hit update
    (hits win over passes). Every touched voxel becomes observed.
    """
    nx, ny, nz = dims[0], dims[1], dims[2]
    n = nx * ny * nz
    marks = np.zeros(n, dtype=np.int8)
    for r in range(dirs.shape[0]):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        rng = ranges[r]
        has_hit = np.isfinite(rng) and rng <= max_range
        stop_t = rng if has_hit else max_range
        hit_flat = -1
        if has_hit:
            hx = origin[0] + dx * rng
            hy = origin[1] + dy * rng
            hz = origin[2] + dz * rng
            hix = int(np.floor((hx - map_origin[0]) / res))
            hiy = int(np.floor((hy - map_origin[1]) / res))
            hiz = int(np.floor((hz - map_origin[2]) / res))
            if 0 <= hix < nx and 0 <= hiy < ny and 0 <= hiz < nz:
                hit_flat = _flat(hix, hiy, hiz, ny, nz)
        ix = int(np.floor((origin[0] - map_origin[0]) / res))
        iy = int(np.floor((origin[1] - map_origin[1]) / res))
        iz = int(np.floor((origin[2] - map_origin[2]) / res))
        sx = 1 if dx > 0 else -1
        sy = 1 if dy > 0 else -1
        sz = 1 if dz > 0 else -1
        tdx = abs(res / dx) if dx != 0.0 else 1e30
        tdy = abs(res / dy) if dy != 0.0 else 1e30
        tdz = abs(res / dz) if dz != 0.0 else 1e30
        # parametric distance to the first boundary on each axis
        fx = (origin[0] - map_origin[0]) / res - ix
        fy = (origin[1] - map_origin[1]) / res - iy
        fz = (origin[2] - map_origin[2]) / res - iz
        tmx = tdx * (1.0 - fx if sx > 0 else fx) if dx != 0.0 else 1e30
        tmy = tdy * (1.0 - fy if sy > 0 else fy) if dy != 0.0 else 1e30
        tmz = tdz * (1.0 - fz if sz > 0 else fz) if dz != 0.0 else 1e30
        t = 0.0
        while t < stop_t:
            if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                f = _flat(ix, iy, iz, ny, nz)
                if f != hit_flat and marks[f] == 0:
                    marks[f] = 1
            if tmx < tmy:
                if tmx < tmz:
                    ix += sx
                    t = tmx
                    tmx += tdx
                else:
                    iz += sz
                    t = tmz
                    tmz += tdz
            else:
                if tmy < tmz:
                    iy += sy
                    t = tmy
                    tmy += tdy
                else:
                    iz += sz
                    t = tmz
                    tmz += tdz
        if hit_flat >= 0:
            marks[hit_flat] = 2
    for f in range(n):
        m = marks[f]
        if m == 0:
            continue
        v = log_odds[f] + (hit_update if m == 2 else miss_update)
        if v > clamp:
            v = clamp
        if v < -clamp:
            v = -clamp
        log_odds[f] = v
        observed[f] = 1


@nb.njit(cache=True)
def count_unknown_along_rays(state, map_origin, res, dims,
                             origin, dirs, max_range):
    """Distinct unknown voxels visible along rays, occlusion-aware.

    A ray stops at the first occupied voxel; unknown voxels are counted but
    do not block. Duplicates across rays count once.
    """
    nx, ny, nz = dims[0], dims[1], dims[2]
    visited = np.zeros(nx * ny * nz, dtype=np.uint8)
    total = 0
    for r in range(dirs.shape[0]):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = int(np.floor((origin[0] - map_origin[0]) / res))
        iy = int(np.floor((origin[1] - map_origin[1]) / res))
        iz = int(np.floor((origin[2] - map_origin[2]) / res))
        sx = 1 if dx > 0 else -1
        sy = 1 if dy > 0 else -1
        sz = 1 if dz > 0 else -1
        tdx = abs(res / dx) if dx != 0.0 else 1e30
        tdy = abs(res / dy) if dy != 0.0 else 1e30
        tdz = abs(res / dz) if dz != 0.0 else 1e30
        fx = (origin[0] - map_origin[0]) / res - ix
        fy = (origin[1] - map_origin[1]) / res - iy
        fz = (origin[2] - map_origin[2]) / res - iz
        tmx = tdx * (1.0 - fx if sx > 0 else fx) if dx != 0.0 else 1e30
        tmy = tdy * (1.0 - fy if sy > 0 else fy) if dy != 0.0 else 1e30
        tmz = tdz * (1.0 - fz if sz > 0 else fz) if dz != 0.0 else 1e30
        t = 0.0
        while t < max_range:
            if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                f = _flat(ix, iy, iz, ny, nz)
                s = state[f]
                if s == 2:
                    break
                if s == 0 and visited[f] == 0:
                    visited[f] = 1
                    total += 1
            if tmx < tmy:
                if tmx < tmz:
                    ix += sx
                    t = tmx
                    tmx += tdx
                else:
                    iz += sz
                    t = tmz
                    tmz += tdz
            else:
                if tmy < tmz:
                    iy += sy
                    t = tmy
                    tmy += tdy
                else:
                    iz += sz
                    t = tmz
                    tmz += tdz
    return total


@nb.njit(cache=True, inline="always")
def _seg_point_dist2(ax, ay, az, bx, by, bz, px, py, pz):
    ux, uy, uz = bx - ax, by - ay, bz - az
    vv = ux * ux + uy * uy + uz * uz
    if vv < 1e-18:
        s = 0.0
    else:
        s = ((px - ax) * ux + (py - ay) * uy + (pz - az) * uz) / vv
        if s < 0.0:
            s = 0.0
        if s > 1.0:
            s = 1.0
    cx = ax + s * ux - px
    cy = ay + s * uy - py
    cz = az + s * uz - pz
    return cx * cx + cy * cy + cz * cz


@nb.njit(cache=True)
def capsules_blocked(state, map_origin, res, dims, p0s, p1s, radii,
                     inflate_occ, inflate_unk, unknown_blocks):
    """True if any voxel center lies inside a capsule inflated by
    inflate_occ and is occupied, or (when unknown_blocks) inside the
    capsule inflated by inflate_unk and is unknown."""
    nx, ny, nz = dims[0], dims[1], dims[2]
    for c in range(p0s.shape[0]):
        r_occ = radii[c] + inflate_occ
        r_unk = radii[c] + inflate_unk
        r = max(r_occ, r_unk)
        lox = min(p0s[c, 0], p1s[c, 0]) - r
        hix = max(p0s[c, 0], p1s[c, 0]) + r
        loy = min(p0s[c, 1], p1s[c, 1]) - r
        hiy = max(p0s[c, 1], p1s[c, 1]) + r
        loz = min(p0s[c, 2], p1s[c, 2]) - r
        hiz = max(p0s[c, 2], p1s[c, 2]) + r
        i0 = max(int(np.floor((lox - map_origin[0]) / res)), 0)
        i1 = min(int(np.floor((hix - map_origin[0]) / res)), nx - 1)
        j0 = max(int(np.floor((loy - map_origin[1]) / res)), 0)
        j1 = min(int(np.floor((hiy - map_origin[1]) / res)), ny - 1)
        k0 = max(int(np.floor((loz - map_origin[2]) / res)), 0)
        k1 = min(int(np.floor((hiz - map_origin[2]) / res)), nz - 1)
        for i in range(i0, i1 + 1):
            px = map_origin[0] + (i + 0.5) * res
            for j in range(j0, j1 + 1):
                py = map_origin[1] + (j + 0.5) * res
                for k in range(k0, k1 + 1):
                    f = _flat(i, j, k, ny, nz)
                    s = state[f]
                    if s == 1:
                        continue
                    if s == 0 and not unknown_blocks:
                        continue
                    rr = r_occ if s == 2 else r_unk
                    pz = map_origin[2] + (k + 0.5) * res
                    if _seg_point_dist2(p0s[c, 0], p0s[c, 1], p0s[c, 2],
                                        p1s[c, 0], p1s[c, 1], p1s[c, 2],
                                        px, py, pz) <= rr * rr:
                        return True
    return False


@nb.njit(cache=True)
def carve_capsules(log_odds, observed, map_origin, res, dims,
                   p0s, p1s, radii, inflate, free_value, mode,
                   occ_threshold):
    """Rewrite voxels inside inflated capsules to free.

    mode 0: unconditionally, marking them observed (forced carve);
    mode 1: only observed-occupied voxels, observed flags untouched
            (robot self-filtering);
    mode 2: only unknown voxels, marking them observed (proprioceptive
            clearing of body-swept space; never erases obstacles).
    """
    nx, ny, nz = dims[0], dims[1], dims[2]
    for c in range(p0s.shape[0]):
        r = radii[c] + inflate
        i0 = max(int(np.floor((min(p0s[c, 0], p1s[c, 0]) - r - map_origin[0]) / res)), 0)
        i1 = min(int(np.floor((max(p0s[c, 0], p1s[c, 0]) + r - map_origin[0]) / res)), nx - 1)
        j0 = max(int(np.floor((min(p0s[c, 1], p1s[c, 1]) - r - map_origin[1]) / res)), 0)
        j1 = min(int(np.floor((max(p0s[c, 1], p1s[c, 1]) + r - map_origin[1]) / res)), ny - 1)
        k0 = max(int(np.floor((min(p0s[c, 2], p1s[c, 2]) - r - map_origin[2]) / res)), 0)
        k1 = min(int(np.floor((max(p0s[c, 2], p1s[c, 2]) + r - map_origin[2]) / res)), nz - 1)
        r2 = r * r
        for i in range(i0, i1 + 1):
            px = map_origin[0] + (i + 0.5) * res
            for j in range(j0, j1 + 1):
                py = map_origin[1] + (j + 0.5) * res
                for k in range(k0, k1 + 1):
                    pz = map_origin[2] + (k + 0.5) * res
                    if _seg_point_dist2(p0s[c, 0], p0s[c, 1], p0s[c, 2],
                                        p1s[c, 0], p1s[c, 1], p1s[c, 2],
                                        px, py, pz) > r2:
                        continue
                    f = _flat(i, j, k, ny, nz)
                    if mode == 1:
                        if observed[f] == 1 and log_odds[f] >= occ_threshold:
                            log_odds[f] = free_value
                    elif mode == 2:
                        if observed[f] == 0:
                            log_odds[f] = free_value
                            observed[f] = 1
                    else:
                        log_odds[f] = free_value
                        observed[f] = 1


# ---------------------------------------------------------------------------
# ray-box ground truth


@nb.njit(cache=True)
def raycast_boxes(origin, dirs, inv_rots, centers, half_extents, max_range):
    """Nearest hit of each ray against a set of oriented boxes.

    Returns (ranges, ids); range = inf and id = -1 where nothing is hit
    within max_range. A ray starting inside a box reports the exit distance.
    """
    m = dirs.shape[0]
    nboxes = centers.shape[0]
    out_t = np.full(m, np.inf)
    out_id = np.full(m, -1, dtype=np.int64)
    for r in range(m):
        best = np.inf
        best_id = -1
        for b in range(nboxes):
            ox = origin[0] - centers[b, 0]
            oy = origin[1] - centers[b, 1]
            oz = origin[2] - centers[b, 2]
            lox = inv_rots[b, 0, 0] * ox + inv_rots[b, 0, 1] * oy + inv_rots[b, 0, 2] * oz
            loy = inv_rots[b, 1, 0] * ox + inv_rots[b, 1, 1] * oy + inv_rots[b, 1, 2] * oz
            loz = inv_rots[b, 2, 0] * ox + inv_rots[b, 2, 1] * oy + inv_rots[b, 2, 2] * oz
            ldx = inv_rots[b, 0, 0] * dirs[r, 0] + inv_rots[b, 0, 1] * dirs[r, 1] + inv_rots[b, 0, 2] * dirs[r, 2]
            ldy = inv_rots[b, 1, 0] * dirs[r, 0] + inv_rots[b, 1, 1] * dirs[r, 1] + inv_rots[b, 1, 2] * dirs[r, 2]
            ldz = inv_rots[b, 2, 0] * dirs[r, 0] + inv_rots[b, 2, 1] * dirs[r, 1] + inv_rots[b, 2, 2] * dirs[r, 2]
            tmin = -np.inf
            tmax = np.inf
            ok = True
            for ax in range(3):
                lo = lox if ax == 0 else (loy if ax == 1 else loz)
                ld = ldx if ax == 0 else (ldy if ax == 1 else ldz)
                h = half_extents[b, ax]
                if abs(ld) < 1e-12:
                    if lo < -h or lo > h:
                        ok = False
                        break
                else:
                    t1 = (-h - lo) / ld
                    t2 = (h - lo) / ld
                    if t1 > t2:
                        t1, t2 = t2, t1
                    if t1 > tmin:
                        tmin = t1
                    if t2 < tmax:
                        tmax = t2
                    if tmin > tmax:
                        ok = False
                        break
            if not ok or tmax < 0.0:
                continue
            t_hit = tmin if tmin >= 0.0 else tmax
            if t_hit < best and t_hit <= max_range:
                best = t_hit
                best_id = b
        out_t[r] = best
        out_id[r] = best_id
    return out_t, out_id


@nb.njit(cache=True)
def capsules_hit_boxes(p0s, p1s, radii, inv_rots, centers, half_extents,
                       margin):
    """Ground-truth capsule/box overlap test by dense axis sampling.

    Collision when a sampled axis point is closer to a box than
    radius - margin. Sampling step is a quarter radius, so penetrations
    deeper than the margin cannot slip between samples.
    """
    for c in range(p0s.shape[0]):
        r = radii[c] - margin
        if r <= 0.0:
            continue
        ex = p1s[c, 0] - p0s[c, 0]
        ey = p1s[c, 1] - p0s[c, 1]
        ez = p1s[c, 2] - p0s[c, 2]
        seg_len = np.sqrt(ex * ex + ey * ey + ez * ez)
        nsamp = int(seg_len / max(radii[c] * 0.25, 1e-6)) + 2
        for s in range(nsamp):
            a = s / (nsamp - 1.0)
            px = p0s[c, 0] + a * (p1s[c, 0] - p0s[c, 0])
            py = p0s[c, 1] + a * (p1s[c, 1] - p0s[c, 1])
            pz = p0s[c, 2] + a * (p1s[c, 2] - p0s[c, 2])
            for b in range(centers.shape[0]):
                ox = px - centers[b, 0]
                oy = py - centers[b, 1]
                oz = pz - centers[b, 2]
                lx = inv_rots[b, 0, 0] * ox + inv_rots[b, 0, 1] * oy + inv_rots[b, 0, 2] * oz
                ly = inv_rots[b, 1, 0] * ox + inv_rots[b, 1, 1] * oy + inv_rots[b, 1, 2] * oz
                lz = inv_rots[b, 2, 0] * ox + inv_rots[b, 2, 1] * oy + inv_rots[b, 2, 2] * oz
                dx = abs(lx) - half_extents[b, 0]
                dy = abs(ly) - half_extents[b, 1]
                dz = abs(lz) - half_extents[b, 2]
                if dx < 0.0:
                    dx = 0.0
                if dy < 0.0:
                    dy = 0.0
                if dz < 0.0:
                    dz = 0.0
                if dx * dx + dy * dy + dz * dz < r * r:
                    return True
    return False
