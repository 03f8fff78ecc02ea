"""Deterministic synthetic "brain-like" cases.

Each hemisphere is an ellipsoid whose surface is pushed in and out by a
seeded random spherical-harmonic series (a smooth stand-in for cortical
folding). The inner boundary is the outer one moved inward along vertex
normals. A three-level tissue intensity volume is rendered in a native
frame that differs from template space by a random affine.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import sph_harm_y

from .bvh import closest_point, is_inside
from .errors import SelfIntersectingInner
from .mesh import SURFACE_NAMES, SurfaceSet, TriangleMesh, icosphere
from .volume import AffineTransform, Grid, Volume, save_raw, save_transform

ICO_LEVEL = 4


@dataclass(frozen=True)
class SynthParams:
    seed: int = 0
    semi_axes: tuple[float, float, float] = (26.0, 42.0, 34.0)
    amplitude: float = 4.0
    max_degree: int = 6
    inner_offset: float = 3.0
    gap: float = 4.0
    csf_thickness: float = 3.0
    intensities: dict = field(default_factory=lambda: {"background": 0.0, "csf": 0.2, "gm": 0.6, "wm": 1.0})
    noise_sigma: float = 0.02
    blur_voxels: float = 0.5
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 3.0
    max_rotation_deg: float = 10.0
    max_translation_mm: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    random_transform: bool = True

    def __post_init__(self):
        if not self.inner_offset > 0:
            raise ValueError("inner offset must be positive")
        if not 0 <= self.amplitude < min(self.semi_axes) / 2:
            raise ValueError("fold amplitude must be below half the smallest semi-axis")
        if self.max_degree < 2 and self.amplitude > 0:
            raise ValueError("folds need max_degree >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("semi_axes", "dims", "scale_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthParams:
        d = dict(d)
        for k in ("semi_axes", "dims", "scale_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def template(self) -> SynthParams:
        """The fold-free, noise-free, untransformed reference configuration."""
        return replace(self, amplitude=0.0, noise_sigma=0.0, random_transform=False)


@dataclass(frozen=True)
class SynthCase:
    volume: Volume  # native frame
    surfaces: SurfaceSet  # native frame
    transform: AffineTransform  # native world -> template world
    params: SynthParams

    def template_surfaces(self) -> SurfaceSet:
        return self.surfaces.transformed(self.transform)


def fold_field(directions: np.ndarray, rng: np.random.Generator, max_degree: int, amplitude: float) -> np.ndarray:
    """Real spherical-harmonic series of degrees 2..max_degree on unit
    ``directions``, scaled so its largest magnitude equals ``amplitude``."""
    if amplitude == 0:
        return np.zeros(len(directions))
    x, y, z = directions.T
    theta = np.arccos(np.clip(z, -1, 1))
    phi = np.arctan2(y, x)
    h = np.zeros(len(directions))
    for deg in range(2, max_degree + 1):
        for m in range(-deg, deg + 1):
            coef = rng.normal() / deg
            y_lm = sph_harm_y(deg, abs(m), theta, phi)
            real = np.sqrt(2) * (y_lm.imag if m < 0 else y_lm.real) if m != 0 else y_lm.real
            h += coef * real
    return amplitude * h / np.abs(h).max()


def hemisphere_outer(params: SynthParams, rng: np.random.Generator) -> TriangleMesh:
    """Left hemisphere outer surface, centred on the negative x side."""
    sphere = icosphere(ICO_LEVEL)
    u = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
    base = u * np.asarray(params.semi_axes)
    radial = base / np.linalg.norm(base, axis=1, keepdims=True)
    h = fold_field(u, rng, params.max_degree, params.amplitude)
    verts = base + h[:, None] * radial
    centre = -(params.semi_axes[0] + params.amplitude + params.gap / 2.0)
    return TriangleMesh(verts + np.array([centre, 0.0, 0.0]), sphere.faces)


def inner_from_outer(outer: TriangleMesh, offset: float) -> TriangleMesh:
    inner = TriangleMesh(outer.vertices - offset * outer.vertex_normals, outer.faces)
    flipped = np.einsum("ij,ij->i", inner.face_normals, outer.face_normals) <= 0
    if flipped.any():
        raise SelfIntersectingInner(f"{int(flipped.sum())} inner faces fold over; offset {offset} mm is too large")
    inside = is_inside(outer, outer.bvh, inner.vertices)
    _, dist, _ = closest_point(outer, outer.bvh, inner.vertices)
    if not inside.all() or dist.min() < 0.5 * offset:
        raise SelfIntersectingInner("inner surface leaves the outer shell (offset too large for the curvature)")
    return inner


MIRROR = AffineTransform.from_parts(np.diag([-1.0, 1.0, 1.0]))


def template_surfaces(params: SynthParams, rng: np.random.Generator) -> SurfaceSet:
    left_outer = hemisphere_outer(params, rng)
    left_inner = inner_from_outer(left_outer, params.inner_offset)
    return SurfaceSet({
        "left_outer": left_outer,
        "right_outer": left_outer.transformed(MIRROR),
        "left_inner": left_inner,
        "right_inner": left_inner.transformed(MIRROR),
    })


def random_affine(params: SynthParams, rng: np.random.Generator) -> AffineTransform:
    """Native-to-template affine: rotation about a random axis, per-axis scale, translation."""
    if not params.random_transform:
        return AffineTransform.identity()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg))
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k
    scale = rng.uniform(*params.scale_range, size=3)
    direction = rng.normal(size=3)
    shift = direction / np.linalg.norm(direction) * rng.uniform(0, params.max_translation_mm)
    return AffineTransform.from_parts(rot @ np.diag(scale), shift)


def native_grid(params: SynthParams) -> Grid:
    dims = np.asarray(params.dims)
    origin = -0.5 * (dims - 1) * params.spacing
    return Grid.from_spacing(tuple(params.dims), (params.spacing,) * 3, origin)


def render_volume(surfaces: SurfaceSet, grid: Grid, to_template: AffineTransform, params: SynthParams,
                  rng: np.random.Generator) -> Volume:
    """Tissue intensities at ``grid`` voxel centres (labels looked up in template space)."""
    pts = to_template.apply(grid.world_points())
    tissue = params.intensities
    values = np.full(len(pts), tissue["background"], dtype=np.float64)
    for hemi in ("left", "right"):
        outer, inner = surfaces[f"{hemi}_outer"], surfaces[f"{hemi}_inner"]
        lo, hi = outer.bbox
        near = np.all((pts >= lo - params.csf_thickness) & (pts <= hi + params.csf_thickness), axis=1)
        idx = np.flatnonzero(near)
        q = pts[idx]
        in_outer = is_inside(outer, outer.bvh, q)
        in_inner = is_inside(inner, inner.bvh, q)
        _, d, _ = closest_point(outer, outer.bvh, q)
        csf = ~in_outer & (d <= params.csf_thickness)
        values[idx[csf]] = np.maximum(values[idx[csf]], tissue["csf"])
        values[idx[in_outer]] = tissue["gm"]
        values[idx[in_inner]] = tissue["wm"]
    data = values.reshape(grid.dims)
    if params.blur_voxels > 0:
        data = ndimage.gaussian_filter(data, params.blur_voxels, mode="constant")
    if params.noise_sigma > 0:
        data = data + rng.normal(scale=params.noise_sigma, size=data.shape)
    return Volume(data.astype(np.float32), grid.affine)


def synth_case(params: SynthParams) -> SynthCase:
    """Volume, native-space surfaces and native-to-template transform for one case.

    Independent RNG streams drive geometry, transform and noise, so e.g.
    changing the noise level leaves the surfaces untouched.
    """
    geo_rng, tf_rng, noise_rng = (np.random.default_rng([params.seed, k]) for k in range(3))
    surfaces = template_surfaces(params, geo_rng)
    to_template = random_affine(params, tf_rng)
    volume = render_volume(surfaces, native_grid(params), to_template, params, noise_rng)
    native = surfaces.transformed(to_template.inverse())
    return SynthCase(volume, native, to_template, params)


def template_volume(params: SynthParams) -> Volume:
    """Fold-free, noise-free reference image in template space (registration target)."""
    return synth_case(params.template()).volume


def write_case(case: SynthCase, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_raw(case.volume, d / "volume.cfvol")
    case.surfaces.save(d)
    save_transform(case.transform, d / "transform.txt")
    (d / "params.json").write_text(json.dumps(case.params.to_dict(), indent=2, sort_keys=True) + "\n")
    return d


def read_case(directory) -> SynthCase:
    from .volume import load_transform, load_volume

    d = Path(directory)
    params = SynthParams.from_dict(json.loads((d / "params.json").read_text()))
    return SynthCase(load_volume(d / "volume.cfvol"), SurfaceSet.load(d), load_transform(d / "transform.txt"), params)


def synth_dataset(out_dir, n_cases: int, seed: int, params: SynthParams | None = None) -> list[Path]:
    """``n_cases`` case directories plus ``template.cfvol`` under ``out_dir``."""
    base = params or SynthParams()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_cases):
        case = synth_case(replace(base, seed=seed * 1000 + i))
        paths.append(write_case(case, out / f"case_{i:03d}"))
    save_raw(template_volume(base), out / "template.cfvol")
    return paths


__all__ = ["SURFACE_NAMES", "SynthCase", "SynthParams", "fold_field", "native_grid", "random_affine",
           "read_case", "synth_case", "synth_dataset", "template_surfaces", "template_volume", "write_case"]
