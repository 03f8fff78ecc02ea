"""Dense evaluation lattice and field volumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch
from ..mesh import SURFACE_NAMES
from ..volume import AffineTransform, Grid, TemplateSpace, Volume

LEVELS = {"occ": 0.5, "sdf": 0.0}
GENERIC = "field"  # any scalar field with a caller-chosen level
DEFAULT_CHUNK = 65536


@dataclass(frozen=True)
class GridSpec:
    """``resolution^3`` points spanning the template box, corners included."""

    resolution: int = 128
    template: TemplateSpace = TemplateSpace()

    def __post_init__(self):
        if int(self.resolution) != self.resolution or self.resolution < 8:
            raise ValueError(f"grid resolution must be an integer >= 8, got {self.resolution}")

    @property
    def spacing(self) -> np.ndarray:
        return self.template.extent / (self.resolution - 1)

    @property
    def grid(self) -> Grid:
        n = self.resolution
        return Grid((n, n, n), AffineTransform.from_parts(np.diag(self.spacing), self.template.bbox_min))

    def points(self) -> np.ndarray:
        return self.grid.world_points()


@dataclass(frozen=True)
class ImplicitVolume:
    volume: Volume
    level: float
    representation: str

    def __post_init__(self):
        if self.representation not in LEVELS and self.representation != GENERIC:
            raise ValueError(f"unknown representation {self.representation!r}")
        if not np.isfinite(self.level):
            raise ValueError("level must be finite")
        if self.representation in LEVELS and LEVELS[self.representation] != self.level:
            raise ValueError(f"{self.representation} fields use level {LEVELS[self.representation]}")
        if not np.all(np.isfinite(self.volume.data)):
            raise ValueError("field contains non-finite values")

    def with_data(self, data) -> ImplicitVolume:
        return ImplicitVolume(self.volume.with_data(data), self.level, self.representation)


def field_volumes(values: np.ndarray, grid: Grid, representation: str) -> dict[str, ImplicitVolume]:
    """Split ``(n, 4)`` network outputs into one field per surface.

    Occupancy logits are mapped through a sigmoid so the level is 1/2.
    """
    if values.shape != (grid.size, len(SURFACE_NAMES)):
        raise ShapeMismatch(f"expected {(grid.size, len(SURFACE_NAMES))} values, got {values.shape}")
    v = values.astype(np.float64)
    if representation == "occ":
        v = 0.5 * (1.0 + np.tanh(0.5 * v))
    out = {}
    for k, name in enumerate(SURFACE_NAMES):
        out[name] = ImplicitVolume(Volume(v[:, k].reshape(grid.dims), grid.affine), LEVELS[representation],
                                   representation)
    return out


def evaluate_grid(model, registered: Volume, grid: GridSpec, representation: str,
                  chunk: int = DEFAULT_CHUNK) -> dict[str, ImplicitVolume]:
    """Encode the registered volume once, then decode every lattice point."""
    if model.training:
        raise RuntimeError("evaluate_grid requires a model in eval mode")
    pyramid = model.encode(registered)
    pts = grid.points()
    values = np.empty((len(pts), len(SURFACE_NAMES)), dtype=np.float32)
    for start in range(0, len(pts), chunk):
        values[start:start + chunk] = model.predict(pyramid, pts[start:start + chunk])
    return field_volumes(values, grid.grid, representation)
