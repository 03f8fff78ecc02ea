"""Volumes, affine transforms and volume file I/O.

Volume data is stored as a ``(nx, ny, nz)`` float32 array indexed
``data[i, j, k]``; on disk voxels are written x-fastest, matching NIfTI.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptHeader, DegenerateTransform, IoError, UnsupportedDtype


@dataclass(frozen=True)
class AffineTransform:
    """4x4 homogeneous transform acting on row vectors of points."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise DegenerateTransform(f"expected a 4x4 matrix, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DegenerateTransform("transform has non-finite entries")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise DegenerateTransform("last row must be (0, 0, 0, 1)")
        m[3] = (0.0, 0.0, 0.0, 1.0)
        det = np.linalg.det(m[:3, :3])
        scale = max(np.abs(m[:3, :3]).max(), 1e-300) ** 3
        if abs(det) <= 1e-12 * scale:
            raise DegenerateTransform("linear part is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls(np.eye(4))

    @classmethod
    def from_parts(cls, linear, offset=(0.0, 0.0, 0.0)) -> AffineTransform:
        m = np.eye(4)
        m[:3, :3] = linear
        m[:3, 3] = offset
        return cls(m)

    @classmethod
    def translation(cls, offset) -> AffineTransform:
        return cls.from_parts(np.eye(3), offset)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.linear.T + self.offset

    def apply_vector(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.linear.T

    def inverse(self) -> AffineTransform:
        lin_inv = np.linalg.inv(self.linear)
        return AffineTransform.from_parts(lin_inv, -lin_inv @ self.offset)

    def compose(self, other: AffineTransform) -> AffineTransform:
        """``self.compose(other).apply(p) == self.apply(other.apply(p))``."""
        return AffineTransform(self.matrix @ other.matrix)

    def __matmul__(self, other: AffineTransform) -> AffineTransform:
        return self.compose(other)


@dataclass(frozen=True)
class Grid:
    """Voxel lattice geometry: dims plus voxel-index-to-world affine."""

    dims: tuple[int, int, int]
    affine: AffineTransform

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_spacing(cls, dims, spacing, origin=(0.0, 0.0, 0.0)) -> Grid:
        return cls(tuple(dims), AffineTransform.from_parts(np.diag(spacing), origin))

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(s) for s in np.linalg.norm(self.affine.linear, axis=0))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def index_points(self) -> np.ndarray:
        """All voxel indices as an ``(n, 3)`` float array, C order (k fastest)."""
        axes = [np.arange(d, dtype=np.float64) for d in self.dims]
        ii, jj, kk = np.meshgrid(*axes, indexing="ij")
        return np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)

    def world_points(self) -> np.ndarray:
        return self.affine.apply(self.index_points())


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    affine: AffineTransform = field(default_factory=AffineTransform.identity)

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or min(d.shape) <= 0:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {d.shape}")
        d = np.ascontiguousarray(d, dtype=np.float32)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be strictly positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(s) for s in np.linalg.norm(self.affine.linear, axis=0))

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.affine)

    def with_data(self, data) -> Volume:
        return Volume(np.asarray(data).reshape(self.dims), self.affine)


@dataclass(frozen=True)
class TemplateSpace:
    """Axis-aligned box in template mm coordinates that bounds every surface."""

    bbox_min: tuple[float, float, float] = (-96.0, -96.0, -96.0)
    bbox_max: tuple[float, float, float] = (96.0, 96.0, 96.0)
    name: str = "synthetic"

    def __post_init__(self):
        lo = tuple(float(v) for v in self.bbox_min)
        hi = tuple(float(v) for v in self.bbox_max)
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("bbox_min must be < bbox_max componentwise")
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)

    @property
    def extent(self) -> np.ndarray:
        return np.subtract(self.bbox_max, self.bbox_min)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def clamp(self, points) -> np.ndarray:
        return np.clip(points, self.bbox_min, self.bbox_max)

    def normalize(self, points) -> np.ndarray:
        """Affine map of the box onto [-1, 1]^3."""
        lo = np.asarray(self.bbox_min)
        return 2.0 * (np.asarray(points) - lo) / self.extent - 1.0

    def input_grid(self, size: int) -> Grid:
        """Cell-centred ``size^3`` lattice covering the box (encoder input grid)."""
        step = self.extent / size
        origin = np.asarray(self.bbox_min) + 0.5 * step
        return Grid.from_spacing((size, size, size), step, origin)

    def to_dict(self) -> dict:
        return {"bbox_min": list(self.bbox_min), "bbox_max": list(self.bbox_max), "name": self.name}


# ---------------------------------------------------------------------------
# Raw format and transform files

RAW_MAGIC = "CFVOL1"


def save_raw(volume: Volume, path) -> None:
    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing
    aff = volume.affine.matrix[:3].ravel()
    fields = [RAW_MAGIC, str(nx), str(ny), str(nz)] + [repr(float(v)) for v in (sx, sy, sz, *aff)]
    header = (" ".join(fields) + "\n").encode("utf-8")
    payload = np.asarray(volume.data, dtype="<f4").ravel(order="F").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _load_raw(blob: bytes) -> Volume:
    nl = blob.find(b"\n")
    if nl < 0:
        raise CorruptHeader("raw volume header has no newline")
    parts = blob[:nl].decode("utf-8", errors="replace").split()
    if len(parts) != 19 or parts[0] != RAW_MAGIC:
        raise CorruptHeader(f"malformed raw volume header ({len(parts)} fields)")
    try:
        dims = tuple(int(v) for v in parts[1:4])
        numbers = [float(v) for v in parts[4:]]
    except ValueError as exc:
        raise CorruptHeader(str(exc)) from exc
    if min(dims) <= 0:
        raise CorruptHeader(f"non-positive dims {dims}")
    matrix = np.eye(4)
    matrix[:3] = np.asarray(numbers[3:]).reshape(3, 4)
    n = int(np.prod(dims))
    payload = blob[nl + 1:]
    if len(payload) != 4 * n:
        raise CorruptHeader(f"payload has {len(payload)} bytes, expected {4 * n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    try:
        affine = AffineTransform(matrix)
    except DegenerateTransform as exc:
        raise CorruptHeader(f"bad affine: {exc}") from exc
    return Volume(data.astype(np.float32), affine)


def save_transform(transform: AffineTransform, path) -> None:
    rows = [" ".join(repr(float(v)) for v in row) for row in transform.matrix]
    Path(path).write_text("\n".join(rows) + "\n")


def load_transform(path) -> AffineTransform:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    try:
        values = [float(v) for v in text.split()]
    except ValueError as exc:
        raise CorruptHeader(f"transform file: {exc}") from exc
    if len(values) != 16:
        raise CorruptHeader(f"transform file needs 16 numbers, found {len(values)}")
    try:
        return AffineTransform(np.asarray(values).reshape(4, 4))
    except DegenerateTransform as exc:
        raise CorruptHeader(str(exc)) from exc


# ---------------------------------------------------------------------------
# NIfTI-1

_NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


def _quaternion_affine(b, c, d, pixdim, qoffset) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], qfac * pixdim[3]])
    m = np.eye(4)
    m[:3, :3] = rot * scale
    m[:3, 3] = qoffset
    return m


def _load_nifti(blob: bytes, path: Path) -> Volume:
    if len(blob) < 348:
        raise CorruptHeader(f"NIfTI header truncated ({len(blob)} bytes)")
    hdr = blob[:348]
    for endian in "<>":
        ndim = struct.unpack(endian + "h", hdr[40:42])[0]
        if 1 <= ndim <= 7:
            break
    else:
        raise CorruptHeader("cannot determine byte order from dim[0]")
    sizeof_hdr = struct.unpack(endian + "i", hdr[0:4])[0]
    magic = hdr[344:348]
    if sizeof_hdr != 348 or magic not in (b"n+1\0", b"ni1\0"):
        raise CorruptHeader(f"not a NIfTI-1 header (sizeof_hdr={sizeof_hdr}, magic={magic!r})")
    dim = struct.unpack(endian + "8h", hdr[40:56])
    if ndim > 3 and any(v > 1 for v in dim[4:ndim + 1]):
        raise CorruptHeader("only 3D volumes are supported")
    dims = tuple(max(int(v), 1) for v in dim[1:4])
    if min(dim[1:min(ndim, 3) + 1]) <= 0:
        raise CorruptHeader(f"non-positive dims {dim[1:4]}")
    datatype = struct.unpack(endian + "h", hdr[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDtype(f"NIfTI datatype code {datatype}")
    pixdim = struct.unpack(endian + "8f", hdr[76:108])
    vox_offset = struct.unpack(endian + "f", hdr[108:112])[0]
    slope, inter = struct.unpack(endian + "2f", hdr[112:120])
    qform_code, sform_code = struct.unpack(endian + "2h", hdr[252:256])
    quat = struct.unpack(endian + "3f", hdr[256:268])
    qoffset = struct.unpack(endian + "3f", hdr[268:280])
    srow = struct.unpack(endian + "12f", hdr[280:328])

    spacing = [abs(p) if p != 0 else 1.0 for p in pixdim[1:4]]
    if sform_code > 0:
        matrix = np.eye(4)
        matrix[:3] = np.asarray(srow, dtype=np.float64).reshape(3, 4)
    elif qform_code > 0:
        matrix = _quaternion_affine(*quat, (pixdim[0], *spacing), qoffset)
    else:
        matrix = np.diag([*spacing, 1.0])

    if magic == b"ni1\0":
        img_path = path.with_suffix(".img")
        try:
            payload = img_path.read_bytes()
        except OSError as exc:
            raise IoError(f"paired image file: {exc}") from exc
        start = int(vox_offset)
    else:
        payload = blob
        start = max(int(vox_offset), 352)
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    n = int(np.prod(dims))
    end = start + n * dtype.itemsize
    if len(payload) < end:
        raise CorruptHeader(f"image data truncated: need {end} bytes, have {len(payload)}")
    data = np.frombuffer(payload[start:end], dtype=dtype).reshape(dims, order="F").astype(np.float64)
    if slope != 0 and np.isfinite(slope):
        data = data * slope + inter
    try:
        affine = AffineTransform(matrix)
    except DegenerateTransform:
        affine = AffineTransform(np.diag([*spacing, 1.0]))
    return Volume(data.astype(np.float32), affine)


def load_volume(path) -> Volume:
    """Read a NIfTI-1 (.nii / .hdr+.img) or raw ``CFVOL1`` volume."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if blob.startswith(RAW_MAGIC.encode()):
        return _load_raw(blob)
    return _load_nifti(blob, path)


# ---------------------------------------------------------------------------
# Resampling


def trilinear_sample(data: np.ndarray, idx: np.ndarray, *, snap: float = 1e-6) -> np.ndarray:
    """Sample ``data`` at continuous voxel indices ``idx`` (n, 3); zero outside."""
    dims = np.asarray(data.shape)
    q = np.array(idx, dtype=np.float64)
    r = np.rint(q)
    near = np.abs(q - r) < snap
    q[near] = r[near]
    inside = np.all((q >= 0) & (q <= dims - 1), axis=1)
    out = np.zeros(len(q), dtype=np.float64)
    if not inside.any():
        return out
    qi = q[inside]
    i0 = np.minimum(np.floor(qi).astype(np.int64), np.maximum(dims - 2, 0))
    frac = qi - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    fx, fy, fz = frac.T
    d = data
    acc = np.zeros(len(qi))
    for cx, wx in ((i0[:, 0], 1 - fx), (i1[:, 0], fx)):
        for cy, wy in ((i0[:, 1], 1 - fy), (i1[:, 1], fy)):
            for cz, wz in ((i0[:, 2], 1 - fz), (i1[:, 2], fz)):
                w = wx * wy * wz
                acc += w * d[cx, cy, cz]
    out[inside] = acc
    return out


def resample(src: Volume, world_to_world: AffineTransform | None, out_dims, out_spacing=None,
             out_affine: AffineTransform | None = None, *, chunk: int = 1 << 20) -> Volume:
    """Resample ``src`` onto a new lattice.

    ``world_to_world`` maps source-world coordinates to output-world
    coordinates; each output voxel is pulled from the source through its
    inverse. Samples that fall outside the source lattice are 0.
    """
    if world_to_world is None:
        world_to_world = AffineTransform.identity()
    if out_affine is None:
        if out_spacing is None:
            raise ValueError("need out_spacing or out_affine")
        out_affine = AffineTransform.from_parts(np.diag(out_spacing))
    index_map = src.affine.inverse() @ world_to_world.inverse() @ out_affine
    grid = Grid(tuple(out_dims), out_affine)
    src_data = src.data.astype(np.float64)
    flat = np.empty(grid.size, dtype=np.float64)
    idx = grid.index_points()
    for start in range(0, grid.size, chunk):
        sl = slice(start, start + chunk)
        flat[sl] = trilinear_sample(src_data, index_map.apply(idx[sl]))
    return Volume(flat.reshape(grid.dims).astype(np.float32), out_affine)
