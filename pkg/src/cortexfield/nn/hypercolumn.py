"""Hypercolumn extraction: trilinear interpolation of every pyramid level at
continuous template coordinates, concatenated with the global feature.

Interpolation is expressed as a sparse ``(n_points, n_cells)`` matrix with
eight trilinear weights per row, so the backward pass is its transpose.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from .encoder import FeaturePyramid


def interpolation_matrix(points: np.ndarray, vol_index: np.ndarray, affine, shape, dtype) -> sparse.csr_matrix:
    """Trilinear weights of each point over the flattened ``(B, D, H, W)`` cells.

    Points are mapped to continuous indices by ``affine`` and clamped to
    the map border.
    """
    b, d, h, w = shape
    dims = np.array([d, h, w])
    q = affine.inverse().apply(points)
    q = np.clip(q, 0, dims - 1)
    i0 = np.minimum(np.floor(q).astype(np.int64), np.maximum(dims - 2, 0))
    f = q - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    n = len(points)
    rows = np.repeat(np.arange(n), 8)
    cols = np.empty((n, 8), np.int64)
    vals = np.empty((n, 8))
    base = vol_index.astype(np.int64) * (d * h * w)
    k = 0
    for cx, wx in ((i0[:, 0], 1 - f[:, 0]), (i1[:, 0], f[:, 0])):
        for cy, wy in ((i0[:, 1], 1 - f[:, 1]), (i1[:, 1], f[:, 1])):
            for cz, wz in ((i0[:, 2], 1 - f[:, 2]), (i1[:, 2], f[:, 2])):
                cols[:, k] = base + (cx * h + cy) * w + cz
                vals[:, k] = wx * wy * wz
                k += 1
    return sparse.csr_matrix((vals.ravel().astype(dtype), (rows, cols.ravel())), shape=(n, b * d * h * w))


class Hypercolumn:
    def forward(self, pyr: FeaturePyramid, points: np.ndarray, vol_index: np.ndarray) -> np.ndarray:
        dtype = pyr.global_features.dtype
        parts, mats = [], []
        if pyr.hypercolumns:
            for fmap, affine in zip(pyr.maps, pyr.affines):
                m = interpolation_matrix(points, vol_index, affine, fmap.shape[:4], dtype)
                mats.append(m)
                parts.append(m @ fmap.reshape(-1, fmap.shape[-1]))
        onehot = sparse.csr_matrix((np.ones(len(points), dtype=dtype), (np.arange(len(points)), vol_index)),
                                   shape=(len(points), pyr.batch))
        parts.append(onehot @ pyr.global_features)
        self._cache = (mats, onehot, [m.shape for m in pyr.maps], pyr.global_features.shape[1])
        return np.concatenate(parts, axis=1)

    def backward(self, d_c: np.ndarray):
        """Returns ``(d_maps, d_global)``; ``d_maps`` entries are None without hypercolumns."""
        mats, onehot, shapes, g_dim = self._cache
        d_maps = []
        col = 0
        for m, shape in zip(mats, shapes):
            c = shape[-1]
            d_maps.append(np.asarray(m.T @ d_c[:, col:col + c]).reshape(shape))
            col += c
        if not mats:
            d_maps = [None] * len(shapes)
        d_global = np.asarray(onehot.T @ d_c[:, col:col + g_dim])
        return d_maps, d_global
