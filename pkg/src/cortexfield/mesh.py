"""Triangle meshes: representation, OBJ/OFF I/O, topology audit, primitives
and area-uniform surface sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import EmptyMesh, IoError, NonTriangleFace, NotClosed, ParseError, ZeroArea
from .volume import AffineTransform

log = logging.getLogger(__name__)

SURFACE_NAMES = ("left_outer", "right_outer", "left_inner", "right_inner")


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    dropped_faces: int = 0

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if len(f) and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("a face references the same vertex twice")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def triangles(self) -> np.ndarray:
        """Per-face corner coordinates, shape (F, 3, 3)."""
        t = self.vertices[self.faces]
        t.setflags(write=False)
        return t

    @cached_property
    def _cross(self) -> np.ndarray:
        t = self.triangles
        return np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])

    @property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @property
    def face_normals(self) -> np.ndarray:
        n = self._cross
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def signed_volume(self) -> float:
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    @property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals."""
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], self._cross)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.where(norm > 0, norm, 1.0)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n_vertices == 0:
            raise EmptyMesh("mesh has no vertices")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    @cached_property
    def bvh(self):
        from .bvh import build_bvh
        return build_bvh(self)

    def transformed(self, transform: AffineTransform) -> TriangleMesh:
        """Apply an affine map; winding is flipped for reflections so normals stay outward."""
        faces = self.faces
        if np.linalg.det(transform.linear) < 0:
            faces = faces[:, ::-1]
        return TriangleMesh(transform.apply(self.vertices), faces)

    def flipped(self) -> TriangleMesh:
        return TriangleMesh(self.vertices, self.faces[:, ::-1])


# ---------------------------------------------------------------------------
# topology


def unique_edges(mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edges (sorted vertex pairs) and the number of faces using each."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return edges, counts


def is_closed(mesh: TriangleMesh) -> bool:
    if mesh.n_faces == 0:
        return False
    _, counts = unique_edges(mesh)
    return bool(np.all(counts == 2))


def is_consistently_oriented(mesh: TriangleMesh) -> bool:
    """Every directed edge appears once: neighbours traverse shared edges oppositely."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    return len(np.unique(e, axis=0)) == len(e)


def euler_characteristic(mesh: TriangleMesh) -> int:
    edges, _ = unique_edges(mesh)
    n_vertices = len(np.unique(mesh.faces))
    return int(n_vertices - len(edges) + mesh.n_faces)


def genus(mesh: TriangleMesh) -> int:
    edges, counts = unique_edges(mesh)
    if mesh.n_faces == 0 or np.any(counts != 2):
        bad = int(np.count_nonzero(counts != 2))
        raise NotClosed(f"{bad} edges are not shared by exactly two faces")
    chi = euler_characteristic(mesh)
    return (2 - chi) // 2


# ---------------------------------------------------------------------------
# I/O


def _clean(vertices, faces, path) -> TriangleMesh:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise ParseError(f"{path}: face index out of range")
    repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    areas = np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1) if len(f) else np.zeros(0)
    degenerate = repeated | (areas == 0)
    dropped = int(np.count_nonzero(degenerate))
    if dropped:
        log.warning("%s: dropped %d degenerate faces", path, dropped)
    return TriangleMesh(v, f[~degenerate], dropped_faces=dropped)


def _load_obj(lines, path) -> TriangleMesh:
    verts, faces = [], []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(x) for x in rest[:3]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
        elif tag == "f":
            if len(rest) != 3:
                raise NonTriangleFace(f"{path}:{lineno}: face with {len(rest)} vertices")
            idx = []
            for tok in rest:
                try:
                    k = int(tok.split("/")[0])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: {exc}") from exc
                idx.append(k - 1 if k > 0 else len(verts) + k)
            faces.append(idx)
    return _clean(verts, faces, path)


def _load_off(lines, path) -> TriangleMesh:
    tokens = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if line:
            tokens.append(line.split())
    if not tokens or not tokens[0][0].startswith("OFF"):
        raise ParseError(f"{path}: missing OFF header")
    head = tokens[0][1:] if len(tokens[0]) > 1 else None
    body = tokens[1:]
    if head is None:
        if not body:
            raise ParseError(f"{path}: missing counts line")
        head, body = body[0], body[1:]
    try:
        nv, nf = int(head[0]), int(head[1])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: bad counts line") from exc
    if len(body) < nv + nf:
        raise ParseError(f"{path}: expected {nv} vertices and {nf} faces")
    try:
        verts = [[float(x) for x in row[:3]] for row in body[:nv]]
        faces = []
        for row in body[nv:nv + nf]:
            n = int(row[0])
            if n != 3:
                raise NonTriangleFace(f"{path}: face with {n} vertices")
            faces.append([int(x) for x in row[1:4]])
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return _clean(verts, faces, path)


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text mesh file") from exc
    if path.suffix.lower() == ".off":
        return _load_off(lines, path)
    return _load_obj(lines, path)


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    fmt = lambda xs: " ".join(repr(float(x)) for x in xs)  # noqa: E731
    if path.suffix.lower() == ".off":
        out = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
        out += [fmt(v) for v in mesh.vertices]
        out += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    else:
        out = [f"v {fmt(v)}" for v in mesh.vertices]
        out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    try:
        path.write_text("\n".join(out) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


# ---------------------------------------------------------------------------
# primitives


def icosahedron() -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return TriangleMesh(v, f)


def icosphere(subdivisions: int = 4, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Unit icosahedron refined by edge-midpoint subdivision and projected to the sphere."""
    base = icosahedron()
    v, f = base.vertices.copy(), base.faces.copy()
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.ravel()
        mids = v[uniq[:, 0]] + v[uniq[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)
        a, b, c = f.T
        ab, bc, ca = m.T
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
        v = np.concatenate([v, mids])
    return TriangleMesh(v * radius + np.asarray(center, dtype=np.float64), f)


def box_mesh(lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0)) -> TriangleMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[(hi if (c >> k) & 1 else lo)[k] for k in range(3)] for c in range(8)])
    faces = np.array([
        [0, 2, 3], [0, 3, 1],  # z = lo
        [4, 5, 7], [4, 7, 6],  # z = hi
        [0, 1, 5], [0, 5, 4],  # y = lo
        [2, 6, 7], [2, 7, 3],  # y = hi
        [0, 4, 6], [0, 6, 2],  # x = lo
        [1, 3, 7], [1, 7, 5],  # x = hi
    ])
    return TriangleMesh(corners, faces)


def torus_mesh(major: float = 2.0, minor: float = 0.75, n_major: int = 8, n_minor: int = 8) -> TriangleMesh:
    """Quad grid on the torus, split into triangles (genus 1)."""
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    ring = major + minor * np.cos(ww)
    v = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(ww)], -1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh(v, faces)


# ---------------------------------------------------------------------------
# sampling


def sample_on_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator,
                      return_faces: bool = False):
    """Area-uniform surface samples via square-root barycentric point picking."""
    if n <= 0:
        raise ValueError("n must be positive")
    areas = mesh.face_areas
    total = areas.sum()
    if not total > 0:
        raise ZeroArea("mesh has zero total area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    pts = triangle_point(mesh.triangles[face], u, v)
    return (pts, face) if return_faces else pts


def triangle_point(tri: np.ndarray, u, v) -> np.ndarray:
    """``(1-sqrt u) A + sqrt u (1-v) B + sqrt u v C`` for triangles ``tri`` (n, 3, 3)."""
    su = np.sqrt(np.asarray(u, dtype=np.float64))[..., None]
    v = np.asarray(v, dtype=np.float64)[..., None]
    return (1 - su) * tri[..., 0, :] + su * (1 - v) * tri[..., 1, :] + su * v * tri[..., 2, :]


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurfaceSet:
    """The four target surfaces keyed by ``{hemisphere}_{boundary}``.

    Channel order everywhere (network output, targets) is ``SURFACE_NAMES``.
    """

    meshes: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = set(SURFACE_NAMES) - set(self.meshes)
        if missing:
            raise ValueError(f"missing surfaces: {sorted(missing)}")

    def __getitem__(self, key) -> TriangleMesh:
        if isinstance(key, int):
            key = SURFACE_NAMES[key]
        return self.meshes[key]

    def __iter__(self):
        return iter(self.meshes[name] for name in SURFACE_NAMES)

    def items(self):
        return [(name, self.meshes[name]) for name in SURFACE_NAMES]

    def transformed(self, transform: AffineTransform) -> SurfaceSet:
        return SurfaceSet({name: m.transformed(transform) for name, m in self.items()})

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, mesh in self.items():
            save_mesh(mesh, directory / f"{name}.obj")

    @classmethod
    def load(cls, directory) -> SurfaceSet:
        directory = Path(directory)
        return cls({name: load_mesh(directory / f"{name}.obj") for name in SURFACE_NAMES})
