"""Residual decoder with hypercolumn-conditioned batch normalisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import CondBatchNorm, Linear, ReLU

OUT_DIM = 4


@dataclass(frozen=True)
class DecoderConfig:
    hidden: int = 256
    blocks: int = 5

    def __post_init__(self):
        if self.hidden <= 0 or self.blocks < 0:
            raise ValueError("hidden must be positive and blocks non-negative")

    def to_dict(self) -> dict:
        return {"hidden": self.hidden, "blocks": self.blocks}


class _Block:
    def __init__(self, hidden, c_dim, rng, dtype):
        self.fc0 = Linear(hidden, hidden, rng=rng, dtype=dtype)
        self.bn0 = CondBatchNorm(hidden, c_dim, dtype=dtype)
        self.act0 = ReLU()
        self.fc1 = Linear(hidden, hidden, rng=rng, dtype=dtype)
        self.bn1 = CondBatchNorm(hidden, c_dim, dtype=dtype)
        self.act1 = ReLU()

    def forward(self, x, c, training):
        h = self.act0.forward(self.bn0.forward(self.fc0.forward(x), c, training))
        h = self.act1.forward(self.bn1.forward(self.fc1.forward(h), c, training))
        return x + h

    def backward(self, d_out):
        d_h, d_c1 = self.bn1.backward(self.act1.backward(d_out))
        d_h = self.fc1.backward(d_h)
        d_h, d_c0 = self.bn0.backward(self.act0.backward(d_h))
        d_x = d_out + self.fc0.backward(d_h)
        return d_x, d_c0 + d_c1


class Decoder:
    """Maps normalised coordinates and a condition vector to four field values."""

    def __init__(self, cfg: DecoderConfig, c_dim: int, rng, dtype=np.float32):
        self.cfg = cfg
        self.c_dim = c_dim
        self.fc_in = Linear(3, cfg.hidden, rng=rng, dtype=dtype, gain=1.0)
        self.blocks = [_Block(cfg.hidden, c_dim, rng, dtype) for _ in range(cfg.blocks)]
        self.head = Linear(cfg.hidden, OUT_DIM, rng=rng, dtype=dtype, gain=1.0)

    def layers(self) -> dict:
        out = {"fc_in": self.fc_in}
        for i, blk in enumerate(self.blocks):
            for name in ("fc0", "bn0", "fc1", "bn1"):
                out[f"block{i}.{name}"] = getattr(blk, name)
        out["head"] = self.head
        return out

    def forward(self, p_norm: np.ndarray, c: np.ndarray, training: bool) -> np.ndarray:
        x = self.fc_in.forward(p_norm)
        for blk in self.blocks:
            x = blk.forward(x, c, training)
        return self.head.forward(x)

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        """Backpropagates to parameters; returns the gradient w.r.t. the condition."""
        d_x = self.head.backward(d_out)
        d_c = np.zeros((len(d_out), self.c_dim), dtype=d_out.dtype)
        for blk in reversed(self.blocks):
            d_x, dc = blk.backward(d_x)
            d_c += dc
        self.fc_in.backward(d_x, need_input_grad=False)
        return d_c
