"""Intensity-based 12-DOF affine registration.

Mean squared intensity difference is minimised with L-BFGS over a
three-level smoothing/subsampling pyramid. The optimiser works on the
fixed-to-moving (pull-back) map and the returned transform is its
inverse, i.e. it maps moving-world points onto fixed-world points.

Fixed-image samples are taken at seeded random off-grid positions, so
both images are interpolated at every sample. With on-grid samples only
the moving image is interpolated, and the smoothing that interpolation
applies to its noise and edges varies with the sub-voxel offset; the MSE
minimum then drifts away from the true transform by up to a voxel.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize

from .errors import NonConvergence, NonConvergenceWarning, NoOverlap
from .volume import AffineTransform, Volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 3
    iterations: tuple[int, ...] = (150, 100, 60)
    tol: float = 1e-5
    max_samples: int = 150_000
    scale_limits: tuple[float, float] = (0.5, 2.0)
    seed: int = 0
    strict: bool = False


def _moments(vol: Volume):
    w = np.clip(vol.data.astype(np.float64), 0, None).ravel()
    total = w.sum()
    if total <= 0:
        raise NoOverlap("volume has no positive intensity")
    pts = vol.grid.world_points()
    com = w @ pts / total
    d = pts - com
    cov = (d * w[:, None]).T @ d / total
    return com, cov


def _sample_stack(stack: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Trilinear gather of an ``(nx, ny, nz, c)`` stack; zero outside."""
    dims = np.asarray(stack.shape[:3])
    out = np.zeros((len(idx), stack.shape[3]))
    inside = np.all((idx >= 0) & (idx <= dims - 1), axis=1)
    if not inside.any():
        return out
    q = idx[inside]
    i0 = np.minimum(np.floor(q).astype(np.int64), dims - 2)
    f = q - i0
    acc = np.zeros((len(q), stack.shape[3]))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                acc += (wx * wy * wz)[:, None] * stack[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    out[inside] = acc
    return out


class _Level:
    """Fixed samples and a moving intensity/gradient stack at one pyramid level."""

    def __init__(self, moving: Volume, fixed: Volume, factor: int, max_samples: int, rng):
        sigma = 0.5 * factor if factor > 1 else 0.0
        fdata = fixed.data.astype(np.float64)
        mdata = moving.data.astype(np.float64)
        if sigma:
            fdata = ndimage.gaussian_filter(fdata, sigma, mode="constant")
            mdata = ndimage.gaussian_filter(mdata, sigma, mode="constant")
        idx = np.stack(np.meshgrid(*[np.arange(0, n, factor) for n in fdata.shape],
                                   indexing="ij"), -1).reshape(-1, 3).astype(np.float64)
        if len(idx) > max_samples:
            idx = idx[np.sort(rng.choice(len(idx), max_samples, replace=False))]
        # one jittered sample per subsampling cell
        idx = np.clip(idx + rng.uniform(-0.5 * factor, 0.5 * factor, idx.shape), 0, np.asarray(fdata.shape) - 1)
        self.fixed_values = _sample_stack(fdata[..., None], idx)[:, 0]
        self.fixed_world = fixed.affine.apply(idx)
        grads = np.gradient(mdata)
        jinv_t = np.linalg.inv(moving.affine.linear).T
        world_grad = np.einsum("ij,jxyz->xyzi", jinv_t, np.stack(grads))
        self.stack = np.concatenate([mdata[..., None], world_grad], axis=-1)
        self.to_moving_index = moving.affine.inverse()


class _Problem:
    def __init__(self, com_fixed, sigma):
        self.c_f = com_fixed
        self.sigma = sigma

    def pullback(self, theta) -> AffineTransform:
        # fixed -> moving: y -> base + t + P (y - c_f) / sigma
        t, base, P = theta[:3], theta[3:6], theta[6:].reshape(3, 3)
        lin = P / self.sigma
        return AffineTransform.from_parts(lin, base + t - lin @ self.c_f)

    def energy(self, theta, level: _Level, need_grad=True):
        g = self.pullback(theta)
        mapped = g.apply(level.fixed_world)
        s = _sample_stack(level.stack, level.to_moving_index.apply(mapped))
        r = s[:, 0] - level.fixed_values
        e = float(np.mean(r * r))
        if not need_grad:
            return e, None
        coef = (2.0 / len(r)) * r[:, None] * s[:, 1:]
        d_t = coef.sum(axis=0)
        ytil = (level.fixed_world - self.c_f) / self.sigma
        d_P = coef.T @ ytil
        grad = np.concatenate([d_t, np.zeros(3), d_P.ravel()])
        return e, grad


def _joint_support(level: _Level, problem: _Problem, theta) -> int:
    mapped = problem.pullback(theta).apply(level.fixed_world)
    vals = _sample_stack(level.stack[..., :1], level.to_moving_index.apply(mapped))[:, 0]
    return int(np.count_nonzero((vals > 0) & (level.fixed_values > 0)))


def register_affine(moving: Volume, fixed: Volume, cfg: RegistrationConfig | None = None) -> AffineTransform:
    """Estimate the affine map taking ``moving`` world points onto ``fixed``."""
    cfg = cfg or RegistrationConfig()
    for name, vol in (("moving", moving), ("fixed", fixed)):
        if not np.var(vol.data) > 0:
            raise ValueError(f"{name} volume has zero intensity variance")
    rng = np.random.default_rng(cfg.seed)
    c_m, cov_m = _moments(moving)
    c_f, cov_f = _moments(fixed)
    scale = np.sqrt(np.trace(cov_f) / np.trace(cov_m))
    scale = float(np.clip(scale, *cfg.scale_limits))
    sigma = float(np.sqrt(np.trace(cov_f) / 3.0))
    problem = _Problem(c_f, sigma)
    # fixed -> moving initial map: y -> c_m + (y - c_f) / scale
    theta = np.concatenate([np.zeros(3), c_m, (np.eye(3) * sigma / scale).ravel()])

    factors = [2 ** k for k in reversed(range(cfg.levels))]
    iters = list(cfg.iterations) + [cfg.iterations[-1]] * max(0, cfg.levels - len(cfg.iterations))
    converged = False
    for li, factor in enumerate(factors):
        level = _Level(moving, fixed, factor, cfg.max_samples, rng)
        if li == 0 and _joint_support(level, problem, theta) == 0:
            raise NoOverlap("no joint intensity support after moment initialisation")
        theta, converged = _descend(problem, level, theta, iters[li], cfg.tol)
        log.debug("registration level %d (factor %d): converged=%s", li, factor, converged)

    transform = problem.pullback(theta).inverse()
    if not converged:
        msg = "affine registration hit its iteration cap; returning best-so-far transform"
        if cfg.strict:
            raise NonConvergence(msg)
        warnings.warn(msg, NonConvergenceWarning, stacklevel=2)
    return transform


# the moment-based centre ``base`` stays fixed; translation and linear part move
_FREE = np.r_[np.ones(3, bool), np.zeros(3, bool), np.ones(9, bool)]


def _descend(problem: _Problem, level: _Level, theta, max_iter: int, tol: float):
    """L-BFGS on the free parameters; converged unless the iteration cap was hit."""
    fixed_part = theta.copy()

    def fun(x):
        th = fixed_part.copy()
        th[_FREE] = x
        e, g = problem.energy(th, level)
        return e, g[_FREE]

    e0, g0 = fun(theta[_FREE])
    if e0 == 0 or not np.any(g0):
        return theta, True
    res = minimize(fun, theta[_FREE], jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "ftol": tol * 1e-3, "gtol": 1e-12})
    out = fixed_part.copy()
    out[_FREE] = res.x
    # status 1 is the iteration cap; line-search stalls at machine precision count as converged
    return out, res.status != 1
