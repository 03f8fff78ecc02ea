"""Marching cubes producing closed, consistently oriented 2-manifolds.

The case table is generated rather than transcribed. On each cube face the
corners are walked counter-clockwise (seen from outside the cube) and every
maximal run of inside corners is cut off by one chord; chords chain into
closed loops. Cutting runs separately means two
diagonal inside corners on a face are never joined, which is the face rule
consistent with 6-connected inside / 26-connected outside. The extracted
surface therefore has the topology of the digital set the topology
correction certifies, and neighbouring cubes always agree on shared faces.

Inside the cube every pair of outside corners is 26-adjacent. The only case
where face chords alone would separate them is two diagonally opposite
outside corners; there the two chord loops are joined by a tube instead of
being capped.

Loops are triangulated without any diagonal between two crossings on the
same cube face. Two cube edges that both belong to two different cubes lie
on a common face, so every diagonal is private to its cube and no triangle
can be duplicated from the neighbouring side.
"""
from __future__ import annotations

import numpy as np

from ..errors import NoSurface
from ..mesh import TriangleMesh
from .grid import ImplicitVolume

NUDGE_FRACTION = 1e-6
SLAB = 32

CORNERS = np.array([(c & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)])


def _edges():
    edges, index = [], {}
    for a in range(8):
        for axis in range(3):
            if not (a >> axis) & 1:
                b = a | (1 << axis)
                index[(a, b)] = index[(b, a)] = len(edges)
                edges.append((a, b, axis))
    return edges, index


EDGES, _EDGE_INDEX = _edges()
EDGE_LOW = np.array([CORNERS[a] for a, _, _ in EDGES])
EDGE_AXIS = np.array([axis for _, _, axis in EDGES])


def _faces():
    """Corner cycles of the six cube faces, counter-clockwise seen from outside."""
    out = []
    centre = np.full(3, 0.5)
    for axis in range(3):
        for side in (0, 1):
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            corners = [c for c in range(8) if CORNERS[c][axis] == side]
            u = np.roll(np.eye(3)[axis], 1)
            v = np.cross(normal, u)
            mid = centre + 0.5 * normal
            ang = [np.arctan2((CORNERS[c] - mid) @ v, (CORNERS[c] - mid) @ u) for c in corners]
            out.append([corners[i] for i in np.argsort(ang)])
    return out


FACES = _faces()


def _case_triangles(case: int) -> list[tuple[int, int, int]]:
    inside = [(case >> c) & 1 for c in range(8)]
    nxt = {}
    for cyc in FACES:
        flags = [inside[c] for c in cyc]
        if all(flags) or not any(flags):
            continue
        for p in range(4):
            if flags[p] and not flags[p - 1]:
                q = p
                while flags[(q + 1) % 4]:
                    q = (q + 1) % 4
                entry = _EDGE_INDEX[(cyc[p - 1], cyc[p])]
                exit_ = _EDGE_INDEX[(cyc[q], cyc[(q + 1) % 4])]
                nxt[entry] = exit_
    loops = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        e = nxt[start]
        while e != start:
            loop.append(e)
            seen.add(e)
            e = nxt[e]
        loops.append(loop)
    outside = [c for c in range(8) if not inside[c]]
    if len(outside) == 2 and outside[0] + outside[1] == 7:
        return _tube(*loops)
    tris = []
    for loop in loops:
        tris.extend(_triangulate(loop))
    return tris


def _edge_faces(e: int) -> set:
    a, _, axis = EDGES[e]
    return {(ax, int(CORNERS[a][ax])) for ax in range(3) if ax != axis}


def _polygon_triangulations(poly):
    if len(poly) < 3:
        yield []
        return
    for k in range(1, len(poly) - 1):
        for left in _polygon_triangulations(poly[:k + 1]):
            for right in _polygon_triangulations(poly[k:]):
                yield left + right + [(poly[0], poly[k], poly[-1])]


def _triangulate(loop: list[int]) -> list[tuple[int, int, int]]:
    """Shortest triangulation (by crossing-edge midpoints) whose diagonals
    never join two edges of a common cube face."""
    n = len(loop)
    pos = {e: i for i, e in enumerate(loop)}
    best, best_len = None, np.inf
    for tris in _polygon_triangulations(loop):
        length, ok = 0.0, True
        for t in tris:
            for u, v in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                if (pos[u] - pos[v]) % n in (1, n - 1):
                    continue
                if _edge_faces(u) & _edge_faces(v):
                    ok = False
                    break
                length += np.linalg.norm(_edge_midpoint(u) - _edge_midpoint(v))
            if not ok:
                break
        if ok and length < best_len - 1e-12:
            best, best_len = tris, length
    if best is None:
        raise AssertionError(f"no admissible triangulation for loop {loop}")
    # vertices in loop order keep the loop's winding
    return [tuple(loop[i] for i in sorted(pos[v] for v in t)) for t in best]


def _edge_midpoint(e: int) -> np.ndarray:
    a, b, _ = EDGES[e]
    return 0.5 * (CORNERS[a] + CORNERS[b])


def _tube(a: list[int], b: list[int]) -> list[tuple[int, int, int]]:
    """Strip joining two equally long chord loops. Both loops keep their
    direction, so the strip walks ``b`` backwards while ``a`` advances; the
    rotation of ``b`` is chosen to pair geometrically close edges."""
    n = len(a)

    def cost(j0):
        return sum(np.sum((_edge_midpoint(a[i]) - _edge_midpoint(b[(j0 - i) % n])) ** 2) for i in range(n))

    j0 = min(range(n), key=cost)
    tris = []
    for i in range(n):
        j = (j0 - i) % n
        tris.append((a[i], a[(i + 1) % n], b[j]))
        tris.append((a[(i + 1) % n], b[(j - 1) % n], b[j]))
    return tris


def _build_table():
    cases = [_case_triangles(c) for c in range(256)]
    width = max(len(t) for t in cases)
    table = -np.ones((256, width, 3), np.int64)
    counts = np.zeros(256, np.int64)
    for c, tris in enumerate(cases):
        counts[c] = len(tris)
        if tris:
            table[c, :len(tris)] = tris
    return table, counts


TRI_TABLE, TRI_COUNT = _build_table()


def marching_cubes(iv: ImplicitVolume) -> TriangleMesh:
    """Triangulate the level set of ``iv`` in world coordinates.

    The lattice is padded with one layer of below-level values so the
    surface closes at the border. Corner values equal to the level are
    nudged upward (inside). Normals point from inside (above level) to
    outside.
    """
    f = iv.volume.data.astype(np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite values")
    level = float(iv.level)
    span = float(f.max() - f.min())
    nudge = NUDGE_FRACTION * span if span > 0 else NUDGE_FRACTION
    f = np.where(f == level, level + nudge, f)
    if not np.any(f > level):
        raise NoSurface(f"no sample above level {level}")
    low = min(level - nudge, float(f.min()))
    p = np.pad(f, 1, constant_values=low)
    inside = p > level
    X, Y, Z = p.shape
    edge_low = EDGE_LOW
    keys_all = []
    for s in range(0, X - 1, SLAB):
        e = min(s + SLAB, X - 1)
        case = np.zeros((e - s, Y - 1, Z - 1), np.uint8)
        for c, (i, j, k) in enumerate(CORNERS):
            case |= (inside[s + i:e + i, j:Y - 1 + j, k:Z - 1 + k].astype(np.uint8) << c)
        cells = np.flatnonzero(TRI_COUNT[case.ravel()] > 0)
        if len(cells) == 0:
            continue
        cc = case.ravel()[cells]
        n = TRI_COUNT[cc]
        rep = np.repeat(np.arange(len(cells)), n)
        ordinal = np.arange(len(rep)) - np.repeat(np.cumsum(n) - n, n)
        local = TRI_TABLE[cc[rep], ordinal]
        cx, cy, cz = np.unravel_index(cells[rep], case.shape)
        cx = cx + s
        low_x = cx[:, None] + edge_low[local, 0]
        low_y = cy[:, None] + edge_low[local, 1]
        low_z = cz[:, None] + edge_low[local, 2]
        keys = ((low_x * Y + low_y) * Z + low_z) * 3 + EDGE_AXIS[local]
        keys_all.append(keys)
    keys = np.concatenate(keys_all)
    uniq, inv = np.unique(keys, return_inverse=True)
    faces = inv.reshape(-1, 3)
    axis = uniq % 3
    lin = uniq // 3
    a = np.stack(np.unravel_index(lin, p.shape), axis=1)
    b = a.copy()
    b[np.arange(len(b)), axis] += 1
    va = p[a[:, 0], a[:, 1], a[:, 2]]
    vb = p[b[:, 0], b[:, 1], b[:, 2]]
    t = (level - va) / (vb - va)
    idx = a.astype(np.float64)
    idx[np.arange(len(idx)), axis] += t
    verts = iv.volume.affine.apply(idx - 1.0)
    if np.linalg.det(iv.volume.affine.linear) < 0:
        faces = faces[:, ::-1]
    return TriangleMesh(verts, faces)
