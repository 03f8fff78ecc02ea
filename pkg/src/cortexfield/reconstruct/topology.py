"""Genus-zero topology correction of a sampled implicit field.

The above-level voxels are regrown from a deep interior seed in decreasing
field-value order. A voxel joins the grown set only if it is a simple point
for (6, 26) digital topology (6-connected foreground, 26-connected
background), so the set stays a topological ball throughout. Above-level
voxels that never join are clamped just below the level.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import ndimage

from ..errors import NoSurface
from .grid import ImplicitVolume

CLAMP_FRACTION = 1e-4


def _neighbourhood_tables():
    offs = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)])
    l1 = np.abs(offs).sum(axis=1)
    linf = np.abs(offs).max(axis=1)
    adj6 = -np.ones((27, 6), np.int64)
    adj26 = -np.ones((27, 26), np.int64)
    for a in range(27):
        d = np.abs(offs - offs[a])
        six = np.flatnonzero((d.sum(axis=1) == 1))
        full = np.flatnonzero((d.max(axis=1) == 1))
        adj6[a, :len(six)] = six
        adj26[a, :len(full)] = full
    in18 = (l1 <= 2) & (linf > 0)
    is6 = l1 == 1
    return offs, adj6, adj26, in18, is6


_OFFS, _ADJ6, _ADJ26, _IN18, _IS6 = _neighbourhood_tables()


@nb.njit(cache=True)
def _count_components(member, adj, seeds_mask):
    """Components of ``member`` (27 flags) under ``adj`` that touch ``seeds_mask``."""
    label = np.zeros(27, np.int8)
    stack = np.empty(27, np.int64)
    count = 0
    for s in range(27):
        if not member[s] or label[s] or not seeds_mask[s]:
            continue
        count += 1
        label[s] = 1
        top = 0
        stack[0] = s
        top = 1
        while top > 0:
            top -= 1
            a = stack[top]
            for j in range(adj.shape[1]):
                b = adj[a, j]
                if b < 0:
                    break
                if member[b] and not label[b]:
                    label[b] = 1
                    stack[top] = b
                    top += 1
    return count


@nb.njit(cache=True)
def _is_simple(cube, adj6, adj26, in18, is6):
    """Simple-point test for (6, 26) topology; ``cube`` holds the 27 foreground flags."""
    fg = np.zeros(27, np.bool_)
    bg = np.zeros(27, np.bool_)
    every = np.zeros(27, np.bool_)
    for a in range(27):
        if a == 13:
            continue
        every[a] = True
        fg[a] = cube[a] and in18[a]
        bg[a] = not cube[a]
    if _count_components(fg, adj6, is6) != 1:
        return False
    return _count_components(bg, adj26, every) == 1


@nb.njit(cache=True)
def _before(va, ia, vb, ib):
    return va > vb or (va == vb and ia < ib)


@nb.njit(cache=True)
def _grow(candidate, values, seed, offs, adj6, adj26, in18, is6):
    """Greedy simple-point growth on a zero-padded (X, Y, Z) mask."""
    nx, ny, nz = candidate.shape
    inset = np.zeros(candidate.shape, np.bool_)
    queued = np.zeros(candidate.shape, np.bool_)
    cap = 1
    for v in candidate.ravel():
        if v:
            cap += 1
    hv = np.empty(cap, np.float64)
    hi = np.empty(cap, np.int64)
    size = 0
    # push seed
    hv[0] = values.ravel()[seed]
    hi[0] = seed
    size = 1
    sx = seed // (ny * nz)
    sy = (seed // nz) % ny
    sz = seed % nz
    queued[sx, sy, sz] = True
    cube = np.zeros(27, np.bool_)
    first = True
    while size > 0:
        v0 = hv[0]
        i0 = hi[0]
        size -= 1
        if size > 0:
            # move last to root and sift down
            v = hv[size]
            i = hi[size]
            pos = 0
            while True:
                c = 2 * pos + 1
                if c >= size:
                    break
                if c + 1 < size and _before(hv[c + 1], hi[c + 1], hv[c], hi[c]):
                    c += 1
                if _before(hv[c], hi[c], v, i):
                    hv[pos] = hv[c]
                    hi[pos] = hi[c]
                    pos = c
                else:
                    break
            hv[pos] = v
            hi[pos] = i
        x = i0 // (ny * nz)
        y = (i0 // nz) % ny
        z = i0 % nz
        queued[x, y, z] = False
        if not first:
            for a in range(27):
                cube[a] = inset[x + offs[a, 0], y + offs[a, 1], z + offs[a, 2]]
            if not _is_simple(cube, adj6, adj26, in18, is6):
                continue
        first = False
        inset[x, y, z] = True
        for a in range(27):
            if a == 13:
                continue
            px = x + offs[a, 0]
            py = y + offs[a, 1]
            pz = z + offs[a, 2]
            if candidate[px, py, pz] and not inset[px, py, pz] and not queued[px, py, pz]:
                queued[px, py, pz] = True
                j = (px * ny + py) * nz + pz
                val = values[px, py, pz]
                pos = size
                size += 1
                while pos > 0:
                    parent = (pos - 1) // 2
                    if _before(val, j, hv[parent], hi[parent]):
                        hv[pos] = hv[parent]
                        hi[pos] = hi[parent]
                        pos = parent
                    else:
                        break
                hv[pos] = val
                hi[pos] = j
    return inset


def clamp_value(level: float, delta: float) -> np.float32:
    """``level - delta`` in float32, guaranteed strictly below ``level``."""
    v = np.float32(level - delta)
    while v >= level:
        v = np.nextafter(v, np.float32(-np.inf))
    return v


def topology_correct(iv: ImplicitVolume) -> ImplicitVolume:
    """Return a field whose above-level set is a digital ball (6-connected,
    genus 0, no cavities). Voxels with value equal to the level count as
    above (marching cubes nudges them inside)."""
    f = iv.volume.data
    level = iv.level
    cand = f >= level
    if not cand.any():
        raise NoSurface(f"no voxel at or above level {level}")
    rng_ = float(f.max()) - float(f.min())
    delta = CLAMP_FRACTION * rng_ if rng_ > 0 else CLAMP_FRACTION
    padded = np.pad(cand, 1)
    dist = ndimage.distance_transform_edt(padded)
    seed = int(np.argmax(dist))
    vals = np.pad(f.astype(np.float64), 1, constant_values=-np.inf)
    inset = _grow(padded, vals, seed, _OFFS, _ADJ6, _ADJ26, _IN18, _IS6)[1:-1, 1:-1, 1:-1]
    out = np.array(f, dtype=np.float32)
    out[cand & ~inset] = clamp_value(level, delta)
    return iv.with_data(out)


@dataclass(frozen=True)
class DigitalTopology:
    components: int
    background_components: int
    euler: int

    @property
    def genus(self) -> int:
        """Handle count; only meaningful for one component and no cavities."""
        return 1 - self.euler

    @property
    def is_ball(self) -> bool:
        return self.components == 1 and self.background_components == 1 and self.euler == 1


def digital_topology(mask: np.ndarray) -> DigitalTopology:
    """Component counts and Euler characteristic of a binary set under
    (6, 26) connectivity. The Euler characteristic counts voxels, 6-adjacent
    pairs, 2x2 squares and 2x2x2 blocks."""
    m = np.asarray(mask, dtype=bool)
    _, comps = ndimage.label(m, structure=ndimage.generate_binary_structure(3, 1))
    _, bg = ndimage.label(~np.pad(m, 1), structure=np.ones((3, 3, 3), bool))
    v = int(m.sum())
    e = int((m[1:] & m[:-1]).sum() + (m[:, 1:] & m[:, :-1]).sum() + (m[:, :, 1:] & m[:, :, :-1]).sum())
    sq_xy = m[1:, 1:] & m[:-1, 1:] & m[1:, :-1] & m[:-1, :-1]
    sq_xz = m[1:, :, 1:] & m[:-1, :, 1:] & m[1:, :, :-1] & m[:-1, :, :-1]
    sq_yz = m[:, 1:, 1:] & m[:, :-1, 1:] & m[:, 1:, :-1] & m[:, :-1, :-1]
    f = int(sq_xy.sum() + sq_xz.sum() + sq_yz.sum())
    c = int((sq_xy[:, :, 1:] & sq_xy[:, :, :-1]).sum())
    return DigitalTopology(int(comps), int(bg), v - e + f - c)
