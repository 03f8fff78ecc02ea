"""3D convolutional encoder producing a feature pyramid plus a global feature."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ShapeMismatch
from ..volume import AffineTransform, TemplateSpace
from .layers import Conv3d, Linear, MaxPool3d, ReLU


@dataclass(frozen=True)
class EncoderConfig:
    """Per-level output channels; level 0 has stride 1, later levels stride 2.

    With ``hypercolumns`` the decoder condition is the concatenation of every
    level's interpolated features and the global feature; without it only
    the global feature (of width ``global_dim``) is used.
    """

    levels: tuple[int, ...] = (32, 64, 128, 128)
    global_dim: int = 160
    input_size: int = 96
    global_pool: int = 1
    hypercolumns: bool = True

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(c) for c in self.levels))
        if not self.levels or min(self.levels) <= 0 or self.global_dim <= 0:
            raise ValueError("channel counts must be positive")
        if self.input_size < 2:
            raise ValueError("input_size must be at least 2")

    @property
    def hypercolumn_dim(self) -> int:
        return sum(self.levels) + self.global_dim if self.hypercolumns else self.global_dim

    def level_size(self, k: int) -> int:
        n = self.input_size
        for j in range(1, k + 1):
            n = Conv3d.output_size(n, 2)
        return n

    def without_hypercolumns(self, global_dim: int | None = None) -> EncoderConfig:
        """Ablation: the decoder sees only the global feature, by default
        widened to the full hypercolumn width. ``matched_ablation`` in the
        model module picks the width that matches the parameter count."""
        return replace(self, hypercolumns=False, global_dim=global_dim or self.hypercolumn_dim)

    def to_dict(self) -> dict:
        return {"levels": list(self.levels), "global_dim": self.global_dim, "input_size": self.input_size,
                "global_pool": self.global_pool, "hypercolumns": self.hypercolumns}


@dataclass
class FeaturePyramid:
    maps: list  # per level (B, D, H, W, C)
    affines: list  # per level index -> template mm
    global_features: np.ndarray  # (B, G)
    hypercolumns: bool = True
    extra: dict = field(default_factory=dict)

    @property
    def batch(self) -> int:
        return len(self.global_features)


class Encoder:
    def __init__(self, cfg: EncoderConfig, template: TemplateSpace, rng, dtype=np.float32):
        self.cfg = cfg
        self.template = template
        self.convs, self.relus = [], []
        c_in = 1
        for k, c_out in enumerate(cfg.levels):
            self.convs.append(Conv3d(c_in, c_out, stride=1 if k == 0 else 2, rng=rng, dtype=dtype))
            self.relus.append(ReLU())
            c_in = c_out
        self.pools = [MaxPool3d() for _ in range(cfg.global_pool)]
        n = cfg.level_size(len(cfg.levels) - 1)
        for _ in range(cfg.global_pool):
            n = (n + 1) // 2
        self.global_fc = Linear(n ** 3 * cfg.levels[-1], cfg.global_dim, rng=rng, dtype=dtype, gain=1.0)
        grid = template.input_grid(cfg.input_size)
        self.affines = []
        for k in range(len(cfg.levels)):
            stride = 1 if k == 0 else 2 ** k
            lin = grid.affine.linear * stride
            self.affines.append(AffineTransform.from_parts(lin, grid.affine.offset))

    def layers(self) -> dict:
        out = {f"conv{k}": conv for k, conv in enumerate(self.convs)}
        out["global_fc"] = self.global_fc
        return out

    def forward(self, volumes: np.ndarray) -> FeaturePyramid:
        n = self.cfg.input_size
        if volumes.ndim != 4 or volumes.shape[1:] != (n, n, n):
            raise ShapeMismatch(f"encoder expects (B, {n}, {n}, {n}) input, got {volumes.shape}")
        x = volumes[..., None]
        maps = []
        for conv, relu in zip(self.convs, self.relus):
            x = relu.forward(conv.forward(x))
            maps.append(x)
        g = x
        for pool in self.pools:
            g = pool.forward(g)
        self._pooled_shape = g.shape
        glob = self.global_fc.forward(g.reshape(len(g), -1))
        return FeaturePyramid(maps, self.affines, glob, self.cfg.hypercolumns)

    def backward(self, d_maps: list, d_global: np.ndarray) -> None:
        d = self.global_fc.backward(d_global).reshape(self._pooled_shape)
        for pool in reversed(self.pools):
            d = pool.backward(d)
        for k in reversed(range(len(self.convs))):
            if d_maps[k] is not None:
                d = d + d_maps[k]
            d = self.relus[k].backward(d)
            d = self.convs[k].backward(d, need_input_grad=k > 0)
