"""Independent reference implementations used only by the tests.

They are deliberately slow and simple and share no code with the package
kernels they check.
"""
import numpy as np
from scipy.optimize import linear_sum_assignment


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-300), 0.0, 1.0)
    q = a + t[..., None] * ab
    return np.linalg.norm(p - q, axis=-1)


def point_triangle_distances(p, tris):
    """Distance from one point ``p`` to every triangle in ``tris`` (m, 3, 3).

    Plane projection when it falls inside the triangle (tested with signed
    sub-areas), otherwise the nearest of the three edge segments.
    """
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n, axis=1)
    unit = n / np.maximum(nn, 1e-300)[:, None]
    h = ((p - a) * unit).sum(1)
    q = p - h[:, None] * unit
    s1 = (np.cross(b - a, q - a) * n).sum(1)
    s2 = (np.cross(c - b, q - b) * n).sum(1)
    s3 = (np.cross(a - c, q - c) * n).sum(1)
    inside = (s1 >= 0) & (s2 >= 0) & (s3 >= 0) & (nn > 0)
    edge = np.minimum(np.minimum(_segment_distance(p, a, b), _segment_distance(p, b, c)),
                      _segment_distance(p, c, a))
    return np.where(inside, np.abs(h), edge)


def brute_distance(mesh, points):
    tris = mesh.vertices[mesh.faces]
    return np.array([point_triangle_distances(p, tris).min() for p in np.atleast_2d(points)])


def winding_number(mesh, points):
    """Generalised winding number by summing signed solid angles."""
    tris = mesh.vertices[mesh.faces]
    out = np.empty(len(points))
    for i, p in enumerate(points):
        a, b, c = (tris[:, k] - p for k in range(3))
        la, lb, lc = (np.linalg.norm(v, axis=1) for v in (a, b, c))
        num = np.einsum("ij,ij->i", a, np.cross(b, c))
        den = la * lb * lc + np.einsum("ij,ij->i", a, b) * lc + np.einsum("ij,ij->i", b, c) * la \
            + np.einsum("ij,ij->i", c, a) * lb
        out[i] = 2.0 * np.arctan2(num, den).sum() / (4.0 * np.pi)
    return out


def exact_emd(x, y):
    """Exact optimal assignment cost between equal-size uniform clouds."""
    cost = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2)
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].mean())


_SIX = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def _shift(mask, d, fill):
    out = np.full_like(mask, fill)
    src = tuple(slice(max(-s, 0), mask.shape[k] - max(s, 0)) for k, s in enumerate(d))
    dst = tuple(slice(max(s, 0), mask.shape[k] - max(-s, 0)) for k, s in enumerate(d))
    out[dst] = mask[src]
    return out


def dilate6(mask):
    out = mask.copy()
    for d in _SIX:
        out |= _shift(mask, d, False)
    return out


def erode6(mask):
    out = mask.copy()
    for d in _SIX:
        out &= _shift(mask, d, False)
    return out


def ribbon_reference(mask):
    """Opening then dilation with the 6-neighbour cross, by explicit shifts."""
    return dilate6(dilate6(erode6(mask)))


def sphere_field(n, radius_frac=0.5):
    """Signed distance (positive inside) to a sphere centred in an n^3 index grid."""
    c = (n - 1) / 2.0
    x = np.arange(n) - c
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    return radius_frac * c - np.sqrt(X ** 2 + Y ** 2 + Z ** 2)


def torus_field(n, major=0.5, minor=0.2):
    x = np.linspace(-1, 1, n)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    return minor - np.sqrt((np.sqrt(X ** 2 + Y ** 2) - major) ** 2 + Z ** 2)


def blob_field(seed, n=32, sigma=2.0):
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    f = ndimage.gaussian_filter(rng.normal(size=(n, n, n)), sigma)
    return f / f.std()


def rotation(axis, angle):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


def rotation_angle_deg(r_est, r_true):
    cos = (np.trace(r_est.T @ r_true) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def naive_conv3d(x, weight, bias, stride):
    """Direct 3x3x3 convolution (padding 1) by summing 27 shifted products.

    ``x`` is (B, D, H, W, Cin), ``weight`` (Cin, 3, 3, 3, Cout).
    """
    b, d, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    do, ho, wo = ((n - 1) // stride + 1 for n in (d, h, w))
    out = np.zeros((b, do, ho, wo, weight.shape[-1])) + bias
    for i in range(3):
        for j in range(3):
            for k in range(3):
                patch = xp[:, i:i + stride * (do - 1) + 1:stride, j:j + stride * (ho - 1) + 1:stride,
                           k:k + stride * (wo - 1) + 1:stride]
                out += patch @ weight[:, i, j, k, :]
    return out


def fd_check(loss, arrays, grads, rng, h=1e-5, per_array=6):
    """Largest relative error between analytic ``grads`` and central
    differences of ``loss()`` over ``per_array`` random entries of each
    array (perturbed in place). Returns ``{name: (rel_err, max_abs_fd)}``."""
    out = {}
    for name, arr in arrays.items():
        flat_idx = rng.choice(arr.size, size=min(per_array, arr.size), replace=False)
        an, num = [], []
        for f in flat_idx:
            i = np.unravel_index(f, arr.shape)
            orig = arr[i]
            arr[i] = orig + h
            up = loss()
            arr[i] = orig - h
            down = loss()
            arr[i] = orig
            num.append((up - down) / (2 * h))
            an.append(grads[name][i])
        an, num = np.array(an), np.array(num)
        scale = max(np.linalg.norm(num), np.linalg.norm(an), 1e-300)
        out[name] = (float(np.linalg.norm(an - num) / scale), float(np.abs(num).max()))
    return out
