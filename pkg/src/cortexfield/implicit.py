"""Ground-truth implicit targets and the surface-biased training sample pool."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bvh import closest_point, is_inside
from .errors import CorruptHeader, IoError
from .mesh import SurfaceSet, sample_on_surface
from .volume import TemplateSpace

REPRESENTATIONS = ("occ", "sdf")
SOURCE_UNIFORM = 0  # near-surface points carry 1 + index of their source surface
CHUNK = 65_536

POOL_MAGIC = "CFPOOL1"
_RECORD = np.dtype([("point", "<f4", 3), ("target", "<f4", 4), ("source", "u1")])


@dataclass(frozen=True)
class SamplingConfig:
    pool_size: int = 200_000
    uniform_fraction: float = 0.10
    perturbation_sigma_mm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.uniform_fraction <= 1.0:
            raise ValueError("uniform_fraction must lie in [0, 1]")
        if not self.perturbation_sigma_mm > 0:
            raise ValueError("perturbation sigma must be positive")
        if self.pool_size <= 0:
            raise ValueError("pool_size must be positive")

    @property
    def n_uniform(self) -> int:
        return int(math.floor(self.uniform_fraction * self.pool_size + 1e-9))

    @property
    def n_near(self) -> int:
        return self.pool_size - self.n_uniform


@dataclass(frozen=True, eq=False)
class SamplePool:
    points: np.ndarray  # (n, 3) template mm
    targets: np.ndarray  # (n, 4)
    source: np.ndarray  # (n,) uint8
    representation: str
    config: SamplingConfig

    def __len__(self):
        return len(self.points)

    @property
    def near_surface(self) -> np.ndarray:
        return self.source != SOURCE_UNIFORM


def occupancy_targets(points, surfaces: SurfaceSet) -> np.ndarray:
    """Per-surface inside indicator, shape (n, 4), uint8."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.stack([is_inside(m, None, pts) for m in surfaces], axis=1).astype(np.uint8)


def sdf_targets(points, surfaces: SurfaceSet) -> np.ndarray:
    """Signed distance per surface, positive inside, shape (n, 4)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    occ = occupancy_targets(pts, surfaces)
    dist = np.stack([closest_point(m, None, pts)[1] for m in surfaces], axis=1)
    return (2.0 * occ - 1.0) * dist


def _targets(points, surfaces, representation):
    if representation == "occ":
        return occupancy_targets(points, surfaces).astype(np.float64)
    return sdf_targets(points, surfaces)


def build_pool(surfaces: SurfaceSet, cfg: SamplingConfig, representation: str = "sdf",
               template: TemplateSpace | None = None) -> SamplePool:
    """Draw the training pool.

    Near-surface points are split evenly over the four surfaces, sampled
    area-uniformly and jittered by isotropic Gaussian noise; the rest are
    uniform in the template box. Work is split into fixed chunks, each with
    its own RNG stream derived from ``(seed, surface, chunk)``, so the pool
    depends only on the seed.
    """
    if representation not in REPRESENTATIONS:
        raise ValueError(f"representation must be one of {REPRESENTATIONS}")
    template = template or TemplateSpace()
    n_near = cfg.n_near
    shares = [n_near // 4 + (k < n_near % 4) for k in range(4)]
    points, source = [], []
    for k, mesh in enumerate(surfaces):
        for c, start in enumerate(range(0, shares[k], CHUNK)):
            m = min(CHUNK, shares[k] - start)
            rng = np.random.default_rng([cfg.seed, k + 1, c])
            p = sample_on_surface(mesh, m, rng)
            p = p + rng.normal(0.0, cfg.perturbation_sigma_mm, size=p.shape)
            points.append(template.clamp(p))
            source.append(np.full(m, k + 1, np.uint8))
    lo, hi = np.asarray(template.bbox_min), np.asarray(template.bbox_max)
    for c, start in enumerate(range(0, cfg.n_uniform, CHUNK)):
        m = min(CHUNK, cfg.n_uniform - start)
        rng = np.random.default_rng([cfg.seed, 0, c])
        points.append(lo + rng.random((m, 3)) * (hi - lo))
        source.append(np.full(m, SOURCE_UNIFORM, np.uint8))
    pts = np.concatenate(points) if points else np.zeros((0, 3))
    src = np.concatenate(source) if source else np.zeros(0, np.uint8)
    return SamplePool(pts, _targets(pts, surfaces, representation), src, representation, cfg)


def save_pool(pool: SamplePool, path) -> None:
    c = pool.config
    header = f"{POOL_MAGIC} {len(pool)} {pool.representation} {c.uniform_fraction!r} " \
             f"{c.perturbation_sigma_mm!r} {c.seed}\n"
    rec = np.empty(len(pool), dtype=_RECORD)
    rec["point"] = pool.points
    rec["target"] = pool.targets
    rec["source"] = pool.source
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("utf-8"))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_pool(path) -> SamplePool:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    nl = blob.find(b"\n")
    parts = blob[:nl].decode("utf-8", errors="replace").split() if nl > 0 else []
    if len(parts) != 6 or parts[0] != POOL_MAGIC or parts[2] not in REPRESENTATIONS:
        raise CorruptHeader(f"{path}: not a {POOL_MAGIC} file")
    try:
        n, uf, sigma, seed = int(parts[1]), float(parts[3]), float(parts[4]), int(parts[5])
    except ValueError as exc:
        raise CorruptHeader(f"{path}: {exc}") from exc
    payload = blob[nl + 1:]
    if len(payload) != n * _RECORD.itemsize:
        raise CorruptHeader(f"{path}: expected {n} records")
    rec = np.frombuffer(payload, dtype=_RECORD)
    cfg = SamplingConfig(pool_size=max(n, 1), uniform_fraction=uf, perturbation_sigma_mm=sigma, seed=seed)
    return SamplePool(rec["point"].astype(np.float64), rec["target"].astype(np.float64),
                      rec["source"].copy(), parts[2], cfg)
