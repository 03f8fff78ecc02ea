"""Network layers with explicit forward and backward passes.

Activations are channel-last: volumes are ``(B, D, H, W, C)`` and point
features ``(N, C)``. Each layer caches what its backward pass needs during
``forward`` and writes parameter gradients into ``self.grads`` on
``backward`` (overwriting, not accumulating).
"""
from __future__ import annotations

import numba as nb
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}


@nb.njit(cache=True)
def _col2im(dcols, dxp, stride):
    """Scatter-add ``(B, Do, Ho, Wo, 3, 3, 3, C)`` column gradients into the padded input gradient."""
    b, do, ho, wo = dcols.shape[:4]
    c = dcols.shape[7]
    for n in range(b):
        for i in range(do):
            for j in range(ho):
                for k in range(wo):
                    for kd in range(3):
                        for kh in range(3):
                            for kw in range(3):
                                for ch in range(c):
                                    dxp[n, i * stride + kd, j * stride + kh, k * stride + kw, ch] += \
                                        dcols[n, i, j, k, kd, kh, kw, ch]


class Conv3d(Layer):
    """3x3x3 convolution, padding 1, configurable stride."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        fan_in = 27 * c_in
        self.params["weight"] = (rng.standard_normal((c_in, 3, 3, 3, c_out)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["bias"] = np.zeros(c_out, dtype=dtype)

    @staticmethod
    def output_size(n: int, stride: int) -> int:
        return (n - 1) // stride + 1

    def _matrix(self) -> np.ndarray:
        """Weight as a ``(27 * c_in, c_out)`` matrix, rows ordered (kd, kh, kw, c_in)."""
        return self.params["weight"].transpose(1, 2, 3, 0, 4).reshape(27 * self.c_in, self.c_out)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 5 or x.shape[-1] != self.c_in:
            raise ShapeMismatch(f"conv expects (B, D, H, W, {self.c_in}), got {x.shape}")
        s = self.stride
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))[:, ::s, ::s, ::s]
        b, do, ho, wo = win.shape[:4]
        # im2col with columns ordered (kd, kh, kw, c) so col2im slices are contiguous
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(b * do * ho * wo, 27 * self.c_in)
        out = cols @ self._matrix() + self.params["bias"]
        self._cache = (cols, x.shape, (b, do, ho, wo))
        return out.reshape(b, do, ho, wo, self.c_out)

    def backward(self, grad: np.ndarray, need_input_grad: bool = True):
        cols, in_shape, (b, do, ho, wo) = self._cache
        g = grad.reshape(-1, self.c_out)
        dw = (cols.T @ g).reshape(3, 3, 3, self.c_in, self.c_out)
        self.grads["weight"] = np.ascontiguousarray(dw.transpose(3, 0, 1, 2, 4))
        self.grads["bias"] = g.sum(axis=0)
        if not need_input_grad:
            return None
        dcols = (g @ self._matrix().T).reshape(b, do, ho, wo, 3, 3, 3, self.c_in)
        s = self.stride
        _, d, h, wd, c = in_shape
        dxp = np.zeros((b, d + 2, h + 2, wd + 2, c), dtype=grad.dtype)
        _col2im(dcols, dxp, s)
        return dxp[:, 1:-1, 1:-1, 1:-1, :]


class MaxPool3d(Layer):
    """2x2x2 max pooling, stride 2; odd extents are padded with -inf."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, d, h, w, c = x.shape
        pd, ph, pw = d % 2, h % 2, w % 2
        if pd or ph or pw:
            x = np.pad(x, ((0, 0), (0, pd), (0, ph), (0, pw), (0, 0)), constant_values=-np.inf)
        D, H, W = x.shape[1:4]
        blocks = x.reshape(b, D // 2, 2, H // 2, 2, W // 2, 2, c).transpose(0, 1, 3, 5, 7, 2, 4, 6)
        blocks = blocks.reshape(b, D // 2, H // 2, W // 2, c, 8)
        arg = blocks.argmax(axis=-1)
        self._cache = (arg, (b, d, h, w, c), (D, H, W))
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        arg, (b, d, h, w, c), (D, H, W) = self._cache
        blocks = np.zeros(grad.shape + (8,), dtype=grad.dtype)
        np.put_along_axis(blocks, arg[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(b, D // 2, H // 2, W // 2, c, 2, 2, 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
        return blocks.reshape(b, D, H, W, c)[:, :d, :h, :w]


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self._mask


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng=None, dtype=np.float32, gain: float = 2.0):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params["weight"] = (rng.standard_normal((n_in, n_out)) * np.sqrt(gain / n_in)).astype(dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"linear expects {self.n_in} inputs, got {x.shape[-1]}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad: np.ndarray, need_input_grad: bool = True):
        self.grads["weight"] = self._x.T @ grad
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"].T if need_input_grad else None


class CondBatchNorm(Layer):
    """Batch normalisation whose per-point scale and shift are linear in a
    conditioning vector.

    Training mode normalises over the point axis of the current batch and
    updates running statistics; eval mode uses the running statistics, so
    each point's output depends only on its own inputs.
    """

    def __init__(self, n_features: int, c_dim: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.n_features, self.c_dim = n_features, c_dim
        self.momentum, self.eps = momentum, eps
        # scale starts at 1 and shift at 0 regardless of the condition
        self.params["weight"] = np.zeros((c_dim, 2 * n_features), dtype=dtype)
        self.params["bias"] = np.concatenate([np.ones(n_features), np.zeros(n_features)]).astype(dtype)
        self.buffers["running_mean"] = np.zeros(n_features, dtype=dtype)
        self.buffers["running_var"] = np.ones(n_features, dtype=dtype)

    def forward(self, x: np.ndarray, c: np.ndarray, training: bool) -> np.ndarray:
        if x.shape[1] != self.n_features or c.shape[1] != self.c_dim or len(x) != len(c):
            raise ShapeMismatch(f"cbn expects ({len(x)}, {self.n_features}) / ({len(x)}, {self.c_dim}), "
                                f"got {x.shape} / {c.shape}")
        gb = c @ self.params["weight"] + self.params["bias"]
        gamma, beta = gb[:, :self.n_features], gb[:, self.n_features:]
        if training:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * var).astype(x.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (c, xhat, gamma, inv_std, training)
        return gamma * xhat + beta

    def backward(self, grad: np.ndarray):
        """Returns ``(d_x, d_c)``."""
        c, xhat, gamma, inv_std, training = self._cache
        d_gb = np.concatenate([grad * xhat, grad], axis=1)
        self.grads["weight"] = c.T @ d_gb
        self.grads["bias"] = d_gb.sum(axis=0)
        d_c = d_gb @ self.params["weight"].T
        d_xhat = grad * gamma
        if training:
            n = len(grad)
            d_x = inv_std / n * (n * d_xhat - d_xhat.sum(axis=0) - xhat * (d_xhat * xhat).sum(axis=0))
        else:
            d_x = d_xhat * inv_std
        return d_x, d_c


def loss_bce(logits: np.ndarray, targets: np.ndarray):
    """Mean binary cross-entropy on logits; returns ``(loss, d_logits)``."""
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"prediction {logits.shape} vs targets {targets.shape}")
    x = logits.astype(np.float64)
    t = targets.astype(np.float64)
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    sig = np.exp(-np.logaddexp(0.0, -x))
    grad = (sig - t) / x.size
    return float(per.mean()), grad.astype(logits.dtype)


def loss_l1(pred: np.ndarray, targets: np.ndarray):
    """Mean absolute error; returns ``(loss, d_pred)``."""
    if pred.shape != targets.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs targets {targets.shape}")
    diff = pred.astype(np.float64) - targets
    return float(np.abs(diff).mean()), (np.sign(diff) / diff.size).astype(pred.dtype)
