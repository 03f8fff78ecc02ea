"""Bounding-volume hierarchy over mesh faces and the exact queries built on it.

Queries are compiled with numba and run in parallel over points; every
point is independent so results do not depend on the thread count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import DegenerateAfterFallbacks, EmptyMesh
from .mesh import TriangleMesh
from .volume import Grid, Volume

LEAF_SIZE = 4
DEGENERATE_TOL = 1e-9

# Primary ray direction followed by the fixed fallback list; all components
# non-zero and mutually non-axis-aligned.
RAY_DIRECTIONS = np.array([
    [0.5773502692, 0.5773502692, 0.5773502692],
    [0.8017837257, 0.2672612419, 0.5345224838],
    [-0.2672612419, 0.8017837257, 0.5345224838],
    [0.3713906764, -0.5570860145, 0.7427813527],
    [-0.6963106238, -0.1740776560, 0.6963106238],
    [0.4364357805, 0.2182178902, -0.8728715609],
    [-0.1825741858, -0.3651483717, -0.9128709292],
    [0.9045340337, -0.3015113446, -0.3015113446],
    [-0.5184758474, 0.6172331517, -0.5925438254],
])
RAY_DIRECTIONS = RAY_DIRECTIONS / np.linalg.norm(RAY_DIRECTIONS, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Bvh:
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    tri: np.ndarray  # (F, 3, 3) corner coordinates, original face order

    @property
    def n_nodes(self) -> int:
        return len(self.left)


@nb.njit(cache=True)
def _build(centroids, tri_lo, tri_hi, leaf_size):
    m = centroids.shape[0]
    max_nodes = 2 * m + 1
    lo = np.empty((max_nodes, 3))
    hi = np.empty((max_nodes, 3))
    left = -np.ones(max_nodes, np.int64)
    right = -np.ones(max_nodes, np.int64)
    start = np.zeros(max_nodes, np.int64)
    count = np.zeros(max_nodes, np.int64)
    order = np.arange(m)
    stack = np.empty((max_nodes, 3), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = m
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        s = stack[sp, 1]
        e = stack[sp, 2]
        for k in range(3):
            lo[node, k] = np.inf
            hi[node, k] = -np.inf
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for ii in range(s, e):
            f = order[ii]
            for k in range(3):
                lo[node, k] = min(lo[node, k], tri_lo[f, k])
                hi[node, k] = max(hi[node, k], tri_hi[f, k])
                clo[k] = min(clo[k], centroids[f, k])
                chi[k] = max(chi[k], centroids[f, k])
        axis = 0
        ext = chi[0] - clo[0]
        for k in range(1, 3):
            if chi[k] - clo[k] > ext:
                ext = chi[k] - clo[k]
                axis = k
        if e - s <= leaf_size or ext <= 0.0:
            start[node] = s
            count[node] = e - s
            continue
        seg = order[s:e].copy()
        keys = centroids[seg, axis]
        srt = np.argsort(keys, kind="mergesort")
        order[s:e] = seg[srt]
        mid = (s + e) // 2
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        stack[sp, 0] = lc
        stack[sp, 1] = s
        stack[sp, 2] = mid
        sp += 1
        stack[sp, 0] = rc
        stack[sp, 1] = mid
        stack[sp, 2] = e
        sp += 1
    return lo[:n_nodes], hi[:n_nodes], left[:n_nodes], right[:n_nodes], start[:n_nodes], count[:n_nodes], order


def build_bvh(mesh: TriangleMesh) -> Bvh:
    if mesh.n_faces == 0:
        raise EmptyMesh("cannot build a BVH over an empty mesh")
    tri = np.ascontiguousarray(mesh.triangles)
    parts = _build(tri.mean(axis=1), tri.min(axis=1), tri.max(axis=1), LEAF_SIZE)
    return Bvh(*parts, tri=tri)


# ---------------------------------------------------------------------------
# closest point


@nb.njit(cache=True, inline="always")
def _closest_on_triangle(px, py, pz, t):
    ax, ay, az = t[0, 0], t[0, 1], t[0, 2]
    bx, by, bz = t[1, 0], t[1, 1], t[1, 2]
    cx, cy, cz = t[2, 0], t[2, 1], t[2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@nb.njit(cache=True, inline="always")
def _box_d2(lo, hi, node, px, py, pz):
    d2 = 0.0
    for k, p in ((0, px), (1, py), (2, pz)):
        if p < lo[node, k]:
            d = lo[node, k] - p
            d2 += d * d
        elif p > hi[node, k]:
            d = p - hi[node, k]
            d2 += d * d
    return d2


@nb.njit(cache=True, parallel=True)
def _closest_batch(points, lo, hi, left, right, start, count, order, tri, proj, dist, face):
    n = points.shape[0]
    for i in nb.prange(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        best_f = -1
        bx = by = bz = 0.0
        stack = np.empty(128, np.int64)
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_d2(lo, hi, node, px, py, pz) > best:
                continue
            if left[node] < 0:
                for ii in range(start[node], start[node] + count[node]):
                    f = order[ii]
                    qx, qy, qz = _closest_on_triangle(px, py, pz, tri[f])
                    d2 = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
                    if d2 < best or (d2 == best and f < best_f):
                        best = d2
                        best_f = f
                        bx, by, bz = qx, qy, qz
            else:
                l, r = left[node], right[node]
                dl = _box_d2(lo, hi, l, px, py, pz)
                dr = _box_d2(lo, hi, r, px, py, pz)
                if dl <= dr:
                    stack[sp] = r
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = r
                sp += 2
        proj[i, 0] = bx
        proj[i, 1] = by
        proj[i, 2] = bz
        dist[i] = np.sqrt(best)
        face[i] = best_f


def closest_point(mesh: TriangleMesh, bvh: Bvh | None, points):
    """Exact nearest surface point for each query point.

    Returns ``(projection (n, 3), distance (n,), face_index (n,))``;
    equidistant faces resolve to the lowest face index.
    """
    bvh = bvh if bvh is not None else mesh.bvh
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    n = len(pts)
    proj = np.empty((n, 3))
    dist = np.empty(n)
    face = np.empty(n, np.int64)
    if n:
        _closest_batch(pts, bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start, bvh.count,
                       bvh.order, bvh.tri, proj, dist, face)
    return proj, dist, face


# ---------------------------------------------------------------------------
# inside / outside by ray parity

_OUT, _IN, _DEGEN = 0, 1, 2


@nb.njit(cache=True, inline="always")
def _ray_hits_box(lo, hi, node, px, py, pz, idx, idy, idz):
    tmin = 0.0
    tmax = np.inf
    for k, p, inv in ((0, px, idx), (1, py, idy), (2, pz, idz)):
        t1 = (lo[node, k] - p) * inv
        t2 = (hi[node, k] - p) * inv
        if t1 > t2:
            t1, t2 = t2, t1
        tmin = max(tmin, t1)
        tmax = min(tmax, t2)
    # slack so rays grazing a box face are not missed
    return tmin <= tmax + 1e-9


@nb.njit(cache=True)
def _parity(px, py, pz, dx, dy, dz, lo, hi, left, right, start, count, order, tri, tol):
    idx, idy, idz = 1.0 / dx, 1.0 / dy, 1.0 / dz
    crossings = 0
    stack = np.empty(128, np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _ray_hits_box(lo, hi, node, px, py, pz, idx, idy, idz):
            continue
        if left[node] >= 0:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
            continue
        for ii in range(start[node], start[node] + count[node]):
            t = tri[order[ii]]
            e1x, e1y, e1z = t[1, 0] - t[0, 0], t[1, 1] - t[0, 1], t[1, 2] - t[0, 2]
            e2x, e2y, e2z = t[2, 0] - t[0, 0], t[2, 1] - t[0, 1], t[2, 2] - t[0, 2]
            tx, ty, tz = px - t[0, 0], py - t[0, 1], pz - t[0, 2]
            # plane normal and signed offset of the query point
            nx = e1y * e2z - e1z * e2y
            ny = e1z * e2x - e1x * e2z
            nz = e1x * e2y - e1y * e2x
            nn = np.sqrt(nx * nx + ny * ny + nz * nz)
            if nn == 0.0:
                continue
            pvx = dy * e2z - dz * e2y
            pvy = dz * e2x - dx * e2z
            pvz = dx * e2y - dy * e2x
            det = e1x * pvx + e1y * pvy + e1z * pvz
            if abs(det) <= 1e-12 * nn:
                # ray parallel to the plane: only a problem when it lies in it
                off = abs(nx * tx + ny * ty + nz * tz) / nn
                if off <= tol:
                    return _DEGEN
                continue
            inv = 1.0 / det
            u = (tx * pvx + ty * pvy + tz * pvz) * inv
            if u < -tol or u > 1.0 + tol:
                continue
            qx = ty * e1z - tz * e1y
            qy = tz * e1x - tx * e1z
            qz = tx * e1y - ty * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < -tol or u + v > 1.0 + tol:
                continue
            dist = (e2x * qx + e2y * qy + e2z * qz) * inv
            if abs(dist) <= tol:
                if u >= -tol and v >= -tol and u + v <= 1.0 + tol:
                    return _IN  # on the surface: boundary counts as interior
            if dist < 0.0:
                continue
            if u <= tol or v <= tol or 1.0 - u - v <= tol:
                return _DEGEN
            crossings += 1
    return crossings & 1


@nb.njit(cache=True, parallel=True)
def _inside_batch(points, dirs, lo, hi, left, right, start, count, order, tri, tol, out):
    n = points.shape[0]
    for i in nb.prange(n):
        res = -1
        for j in range(dirs.shape[0]):
            r = _parity(points[i, 0], points[i, 1], points[i, 2], dirs[j, 0], dirs[j, 1], dirs[j, 2],
                        lo, hi, left, right, start, count, order, tri, tol)
            if r != _DEGEN:
                res = r
                break
        out[i] = res


def is_inside(mesh: TriangleMesh, bvh: Bvh | None, points) -> np.ndarray:
    """Ray-parity inside test for a closed, consistently oriented mesh.

    Points on the surface (within 1e-9) count as inside. A ray that grazes
    a vertex, an edge or a coplanar face is re-cast along the next fixed
    fallback direction.
    """
    bvh = bvh if bvh is not None else mesh.bvh
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    out = np.empty(len(pts), np.int8)
    if len(pts):
        lo, hi = bvh.lo[0], bvh.hi[0]
        near = np.all((pts >= lo - 1e-6) & (pts <= hi + 1e-6), axis=1)
        out[~near] = 0
        sel = np.ascontiguousarray(pts[near])
        if len(sel):
            res = np.empty(len(sel), np.int8)
            _inside_batch(sel, RAY_DIRECTIONS, bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start,
                          bvh.count, bvh.order, bvh.tri, DEGENERATE_TOL, res)
            out[near] = res
    if np.any(out < 0):
        bad = pts[out < 0][0]
        raise DegenerateAfterFallbacks(f"every ray direction is degenerate at {bad}")
    return out.astype(bool)


# ---------------------------------------------------------------------------
# scanline voxelization

MAX_LINE_CROSSINGS = 1024


@nb.njit(cache=True)
def _line_crossings(ox, oy, oz, dx, dy, dz, lo, hi, left, right, start, count, order, tri, tol, ts):
    """Parameters ``t`` at which the full line ``o + t d`` crosses the mesh.

    Returns the number of crossings written to ``ts``, or -1 when the line
    grazes an edge or a vertex, lies in a face plane, or crosses more than
    ``len(ts)`` faces.
    """
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    dn = np.sqrt(dx * dx + dy * dy + dz * dz)
    n = 0
    stack = np.empty(128, np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        tmin = -np.inf
        tmax = np.inf
        for k in range(3):
            # slack in space so lines touching a box face are kept
            a = lo[node, k] - 1e-7
            b = hi[node, k] + 1e-7
            if d[k] == 0.0:
                if o[k] < a or o[k] > b:
                    tmin = np.inf
                continue
            t1 = (a - o[k]) / d[k]
            t2 = (b - o[k]) / d[k]
            if t1 > t2:
                t1, t2 = t2, t1
            tmin = max(tmin, t1)
            tmax = min(tmax, t2)
        if tmin > tmax:
            continue
        if left[node] >= 0:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
            continue
        for ii in range(start[node], start[node] + count[node]):
            t = tri[order[ii]]
            e1x, e1y, e1z = t[1, 0] - t[0, 0], t[1, 1] - t[0, 1], t[1, 2] - t[0, 2]
            e2x, e2y, e2z = t[2, 0] - t[0, 0], t[2, 1] - t[0, 1], t[2, 2] - t[0, 2]
            tx, ty, tz = ox - t[0, 0], oy - t[0, 1], oz - t[0, 2]
            nx = e1y * e2z - e1z * e2y
            ny = e1z * e2x - e1x * e2z
            nz = e1x * e2y - e1y * e2x
            nn = np.sqrt(nx * nx + ny * ny + nz * nz)
            if nn == 0.0:
                continue
            pvx = dy * e2z - dz * e2y
            pvy = dz * e2x - dx * e2z
            pvz = dx * e2y - dy * e2x
            det = e1x * pvx + e1y * pvy + e1z * pvz
            if abs(det) <= 1e-12 * nn * dn:
                if abs(nx * tx + ny * ty + nz * tz) / nn <= tol:
                    return -1
                continue
            inv = 1.0 / det
            u = (tx * pvx + ty * pvy + tz * pvz) * inv
            if u < -tol or u > 1.0 + tol:
                continue
            qx = ty * e1z - tz * e1y
            qy = tz * e1x - tx * e1z
            qz = tx * e1y - ty * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < -tol or u + v > 1.0 + tol:
                continue
            if u <= tol or v <= tol or 1.0 - u - v <= tol:
                return -1
            if n == ts.shape[0]:
                return -1
            ts[n] = (e2x * qx + e2y * qy + e2z * qz) * inv
            n += 1
    return n


@nb.njit(cache=True, parallel=True)
def _voxelize_columns(origins, d, nk, lo, hi, left, right, start, count, order, tri, tol, max_cross, out):
    dn = np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    for c in nb.prange(origins.shape[0]):
        ts = np.empty(max_cross, np.float64)
        n = _line_crossings(origins[c, 0], origins[c, 1], origins[c, 2], d[0], d[1], d[2],
                            lo, hi, left, right, start, count, order, tri, tol, ts)
        if n < 0:
            for k in range(nk):
                out[c, k] = -1
            continue
        crossed = np.sort(ts[:n])
        ahead = 0  # crossings with t <= k, swept upwards
        for k in range(nk):
            while ahead < n and crossed[ahead] < k:
                ahead += 1
            on_surface = False
            for m in range(max(ahead - 1, 0), min(ahead + 1, n)):
                if abs(crossed[m] - k) * dn <= tol:
                    on_surface = True
            if on_surface:
                out[c, k] = 1
            else:
                out[c, k] = (n - ahead) & 1


def voxelize(mesh: TriangleMesh, bvh: Bvh | None, grid: Grid) -> Volume:
    """Binary volume: 1 where the voxel centre lies inside the mesh.

    Each lattice column along the third grid axis is intersected once with
    the mesh and its voxels are classified by the parity of the crossings
    ahead of them, which for a closed mesh equals the ray-parity answer of
    ``is_inside``. Columns that graze an edge, a vertex or a face plane are
    handed to ``is_inside`` point by point.
    """
    bvh = bvh if bvh is not None else mesh.bvh
    ni, nj, nk = grid.dims
    ii, jj = np.meshgrid(np.arange(ni), np.arange(nj), indexing="ij")
    base = np.stack([ii.ravel(), jj.ravel(), np.zeros(ii.size)], axis=1).astype(np.float64)
    origins = np.ascontiguousarray(grid.affine.apply(base))
    d = np.ascontiguousarray(grid.affine.linear[:, 2], dtype=np.float64)
    out = np.empty((len(origins), nk), np.int8)
    if len(origins) and nk:
        _voxelize_columns(origins, d, nk, bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start, bvh.count,
                          bvh.order, bvh.tri, DEGENERATE_TOL, MAX_LINE_CROSSINGS, out)
    bad = np.flatnonzero(out[:, 0] < 0) if nk else np.empty(0, np.int64)
    if len(bad):
        k = np.arange(nk, dtype=np.float64)
        pts = origins[bad, None, :] + k[None, :, None] * d[None, None, :]
        out[bad] = is_inside(mesh, bvh, pts.reshape(-1, 3)).reshape(len(bad), nk)
    return Volume(out.reshape(grid.dims).astype(np.float32), grid.affine)
