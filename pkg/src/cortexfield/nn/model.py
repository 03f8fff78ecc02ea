"""The conditioned implicit field f(p, I) -> R^4."""
from __future__ import annotations

import hashlib
import json

import numpy as np

from ..errors import ShapeMismatch
from ..volume import TemplateSpace, Volume
from .decoder import OUT_DIM, Decoder, DecoderConfig
from .encoder import Encoder, EncoderConfig, FeaturePyramid
from .hypercolumn import Hypercolumn

EVAL_BLOCK = 1024


class FieldModel:
    def __init__(self, encoder_cfg: EncoderConfig | None = None, decoder_cfg: DecoderConfig | None = None,
                 template: TemplateSpace | None = None, seed: int = 0, dtype=np.float32):
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.decoder_cfg = decoder_cfg or DecoderConfig()
        self.template = template or TemplateSpace()
        self.dtype = np.dtype(dtype)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.encoder_cfg, self.template, rng, self.dtype)
        self.hypercolumn = Hypercolumn()
        self.decoder = Decoder(self.decoder_cfg, self.encoder_cfg.hypercolumn_dim, rng, self.dtype)
        self.training = True

    # -- bookkeeping -------------------------------------------------------
    def train(self) -> FieldModel:
        self.training = True
        return self

    def eval(self) -> FieldModel:
        self.training = False
        return self

    def layers(self) -> dict:
        out = {f"encoder.{k}": v for k, v in self.encoder.layers().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.layers().items()})
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": p for ln, layer in self.layers().items() for pn, p in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": layer.grads[pn] for ln, layer in self.layers().items() for pn in layer.params}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{bn}": b for ln, layer in self.layers().items() for bn, b in layer.buffers.items()}

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        lname, _, tname = name.rpartition(".")
        layer = self.layers()[lname]
        store = layer.params if tname in layer.params else layer.buffers
        if tname not in store:
            raise KeyError(name)
        if store[tname].shape != value.shape:
            raise ShapeMismatch(f"{name}: expected {store[tname].shape}, got {value.shape}")
        store[tname] = np.array(value, dtype=self.dtype)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def config_dict(self) -> dict:
        return {"encoder": self.encoder_cfg.to_dict(), "decoder": self.decoder_cfg.to_dict(),
                "template": self.template.to_dict()}

    def config_digest(self) -> str:
        blob = json.dumps(self.config_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- computation -------------------------------------------------------
    def _as_batch(self, volumes) -> np.ndarray:
        if isinstance(volumes, Volume):
            volumes = volumes.data[None]
        arr = np.asarray(volumes, dtype=self.dtype)
        if arr.ndim == 3:
            arr = arr[None]
        return arr

    def encode(self, volumes) -> FeaturePyramid:
        return self.encoder.forward(self._as_batch(volumes))

    def decode(self, pyramid: FeaturePyramid, points: np.ndarray, vol_index=None) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ShapeMismatch(f"points must be (n, 3), got {points.shape}")
        if vol_index is None:
            vol_index = np.zeros(len(points), np.int64)
        c = self.hypercolumn.forward(pyramid, points, np.asarray(vol_index))
        p_norm = self.template.normalize(points).astype(self.dtype)
        return self.decoder.forward(p_norm, c.astype(self.dtype, copy=False), self.training)

    def forward(self, volumes, points, vol_index=None) -> np.ndarray:
        """Full pass, caching everything ``backward`` needs."""
        return self.decode(self.encode(volumes), points, vol_index)

    def backward(self, d_pred: np.ndarray) -> None:
        if d_pred.shape[1] != OUT_DIM:
            raise ShapeMismatch(f"gradient must have {OUT_DIM} columns")
        d_c = self.decoder.backward(d_pred.astype(self.dtype, copy=False))
        d_maps, d_global = self.hypercolumn.backward(d_c)
        self.encoder.backward(d_maps, d_global)

    def predict(self, pyramid: FeaturePyramid, points: np.ndarray, vol_index=None, block: int = EVAL_BLOCK) -> np.ndarray:
        """Eval-mode decoding in fixed-size blocks (padded), so each point's
        value does not depend on how callers chunk their queries."""
        if self.training:
            raise RuntimeError("predict requires eval mode")
        points = np.asarray(points, dtype=np.float64)
        n = len(points)
        if vol_index is None:
            vol_index = np.zeros(n, np.int64)
        out = np.empty((n, OUT_DIM), dtype=self.dtype)
        for start in range(0, n, block):
            stop = min(start + block, n)
            p = points[start:stop]
            vi = vol_index[start:stop]
            if stop - start < block:
                pad = block - (stop - start)
                p = np.concatenate([p, np.repeat(p[-1:], pad, axis=0)])
                vi = np.concatenate([vi, np.repeat(vi[-1:], pad)])
            out[start:stop] = self.decode(pyramid, p, vi)[:stop - start]
        return out


def matched_ablation(encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig) -> EncoderConfig:
    """Global-feature-only encoder whose full model has the parameter count
    closest to the hypercolumn model (count grows monotonically with the
    global width, so a bisection suffices)."""
    def count(cfg):
        return FieldModel(cfg, decoder_cfg).parameter_count()

    target = count(encoder_cfg)
    lo, hi = 1, 4 * encoder_cfg.hypercolumn_dim
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(encoder_cfg.without_hypercolumns(mid)) <= target:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda g: abs(count(encoder_cfg.without_hypercolumns(g)) - target))
    return encoder_cfg.without_hypercolumns(best)

