"""Adam optimisation of the field model on (volume, sample pool) pairs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, RepresentationMismatch, ShapeMismatch
from ..implicit import SamplePool
from ..volume import Volume
from .layers import loss_bce, loss_l1
from .model import FieldModel

log = logging.getLogger(__name__)

LOSS_FOR_REPR = {"occ": "bce", "sdf": "l1"}


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_volumes: int = 5
    batch_points: int = 1024
    loss: str = "l1"
    weight_decay: float = 0.0
    steps: int = 1000
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_points <= 0 or self.batch_volumes <= 0:
            raise ValueError("batch sizes must be positive")
        if self.loss not in ("bce", "l1"):
            raise ValueError("loss must be 'bce' or 'l1'")


class Adam:
    """Adam with optional decoupled weight decay."""

    def __init__(self, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p -= (self.lr * self.weight_decay) * p
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float64)}
        out.update({f"m.{k}": v for k, v in self.m.items()})
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"][0]) if "t" in state else 0
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v.")}


@dataclass
class TrainResult:
    model: FieldModel
    optimizer: Adam
    losses: list = field(default_factory=list)


def train(model: FieldModel, dataset: list[tuple[Volume, SamplePool]], cfg: TrainingConfig,
          optimizer: Adam | None = None, callback=None) -> TrainResult:
    """Minimise the mean point loss over random (volume, point) mini-batches.

    Each step draws ``batch_volumes`` cases (with replacement when the
    dataset is smaller) and ``batch_points`` pool points per case. A case
    drawn several times is encoded once.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    n = model.encoder_cfg.input_size
    for vol, pool in dataset:
        if LOSS_FOR_REPR[pool.representation] != cfg.loss:
            raise RepresentationMismatch(f"{pool.representation} pool cannot train a {cfg.loss} loss")
        if vol.dims != (n, n, n):
            raise ShapeMismatch(f"training volume {vol.dims} does not match encoder input {n}^3")
    loss_fn = loss_bce if cfg.loss == "bce" else loss_l1
    optimizer = optimizer or Adam(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    volumes = np.stack([v.data for v, _ in dataset]).astype(model.dtype)
    model.train()
    losses = []
    params = model.parameters()
    for step in range(cfg.steps):
        picks = rng.choice(len(dataset), size=cfg.batch_volumes, replace=len(dataset) < cfg.batch_volumes)
        uniq, inv = np.unique(picks, return_inverse=True)
        pts, tgt = [], []
        for case in picks:
            pool = dataset[case][1]
            idx = rng.integers(0, len(pool), cfg.batch_points)
            pts.append(pool.points[idx])
            tgt.append(pool.targets[idx])
        points = np.concatenate(pts)
        targets = np.concatenate(tgt)
        vol_index = np.repeat(inv.ravel(), cfg.batch_points)
        pred = model.forward(volumes[uniq], points, vol_index)
        loss, d_pred = loss_fn(pred, targets)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        model.backward(d_pred)
        optimizer.step(params, model.gradients())
        losses.append(loss)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d loss %.5f", step + 1, float(np.mean(losses[-cfg.log_every:])))
        if callback is not None:
            callback(step, loss)
    return TrainResult(model, optimizer, losses)
