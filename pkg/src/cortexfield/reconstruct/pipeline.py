"""End-to-end inference: native volume in, four native-space meshes out."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CortexFieldError, StageError
from ..mesh import SURFACE_NAMES, SurfaceSet, TriangleMesh
from ..registration import RegistrationConfig, register_affine
from ..volume import AffineTransform, Volume, resample
from .grid import GridSpec, ImplicitVolume, evaluate_grid
from .marching_cubes import marching_cubes
from .topology import topology_correct

log = logging.getLogger(__name__)


@dataclass
class Reconstruction:
    surfaces: SurfaceSet
    template_surfaces: SurfaceSet
    transform: AffineTransform
    fields: dict = field(default_factory=dict)
    timings: list = field(default_factory=list)

    def write_timings(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for stage, seconds in self.timings:
                fh.write(json.dumps({"stage": stage, "seconds": round(seconds, 6)}) + "\n")


@contextmanager
def _stage(name: str, timings: list):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (CortexFieldError, ValueError, ArithmeticError) as exc:
        raise StageError(name, exc) from exc
    finally:
        timings.append((name, time.perf_counter() - t0))
    log.info("%s: %.3f s", name, timings[-1][1])


def register_to_template(native: Volume, model, transform: AffineTransform | None = None,
                         template_volume: Volume | None = None,
                         registration: RegistrationConfig | None = None) -> tuple[AffineTransform, Volume]:
    """Native-to-template transform (estimated if not given) and the volume
    resampled onto the encoder's input lattice."""
    if transform is None:
        if template_volume is None:
            raise ValueError("need either a transform or a template volume to register against")
        transform = register_affine(native, template_volume, registration)
    n = model.encoder_cfg.input_size
    grid = model.template.input_grid(n)
    return transform, resample(native, transform, grid.dims, out_affine=grid.affine)


def extract_surfaces(fields: dict[str, ImplicitVolume], jobs: int = 4, timings: list | None = None) -> SurfaceSet:
    """Topology-correct each field concurrently, then run marching cubes."""
    timings = [] if timings is None else timings
    with _stage("topology_correction", timings):
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            corrected = dict(zip(SURFACE_NAMES, pool.map(topology_correct, [fields[n] for n in SURFACE_NAMES])))
    with _stage("marching_cubes", timings):
        meshes = {name: marching_cubes(corrected[name]) for name in SURFACE_NAMES}
    return SurfaceSet(meshes)


def reconstruct_all(model, native: Volume, grid: GridSpec, representation: str,
                    transform: AffineTransform | None = None, template_volume: Volume | None = None,
                    registration: RegistrationConfig | None = None, jobs: int = 4,
                    keep_fields: bool = False) -> Reconstruction:
    """Register (or use ``transform``), evaluate the field on ``grid``,
    correct topology, extract meshes and map them back to native space."""
    timings: list = []
    if model.training:
        model.eval()
    with _stage("registration", timings):
        transform, registered = register_to_template(native, model, transform, template_volume, registration)
    with _stage("implicit_prediction", timings):
        fields = evaluate_grid(model, registered, grid, representation)
    template_set = extract_surfaces(fields, jobs, timings)
    with _stage("native_mapping", timings):
        back = transform.inverse()
        surfaces = SurfaceSet({name: _map_mesh(m, back) for name, m in template_set.items()})
    return Reconstruction(surfaces, template_set, transform, fields if keep_fields else {}, timings)


def _map_mesh(mesh: TriangleMesh, transform: AffineTransform) -> TriangleMesh:
    if np.array_equal(transform.matrix, np.eye(4)):
        return mesh
    return mesh.transformed(transform)


def save_reconstruction(rec: Reconstruction, out_dir) -> None:
    out = Path(out_dir)
    rec.surfaces.save(out)
    rec.write_timings(out / "timings.jsonl")
