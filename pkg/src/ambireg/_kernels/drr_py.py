"""Numpy implementation of the ray-casting kernels.

All coordinates are voxel coordinates; ray parameters are in mm, so ``dirs``
holds the per-mm voxel displacement of each ray.
"""

import numpy as np

CHUNK = 256


def trilinear_points(vol, pts):
    """Trilinear samples of ``vol`` at ``pts`` (m, 3); 0 outside the grid."""
    vol = np.asarray(vol, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    dims = np.array(vol.shape)
    inside = np.all((pts >= 0) & (pts <= dims - 1), axis=-1)
    p = np.where(inside[..., None], pts, 0.0)
    i0 = np.minimum(np.floor(p).astype(np.int64), np.maximum(dims - 2, 0))
    f = p - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    g = 1.0 - f
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1, y1, z1 = i1[..., 0], i1[..., 1], i1[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    gx, gy, gz = g[..., 0], g[..., 1], g[..., 2]
    out = (
        gx * (gy * (gz * vol[x0, y0, z0] + fz * vol[x0, y0, z1])
              + fy * (gz * vol[x0, y1, z0] + fz * vol[x0, y1, z1]))
        + fx * (gy * (gz * vol[x1, y0, z0] + fz * vol[x1, y0, z1])
                + fy * (gz * vol[x1, y1, z0] + fz * vol[x1, y1, z1]))
    )
    return np.where(inside, out, 0.0)


def clip_rays(shape, origin, dirs, s_max):
    """Entry/exit parameters of each ray against the box [0, n-1]^3."""
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    upper = np.asarray(shape, dtype=np.float64) - 1.0
    s0 = np.zeros(dirs.shape[0])
    s1 = np.asarray(s_max, dtype=np.float64) * np.ones(dirs.shape[0])
    for a in range(3):
        d = dirs[:, a]
        o = origin[a]
        par = d == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (0.0 - o) / d
            tb = (upper[a] - o) / d
        lo = np.where(par, -np.inf, np.minimum(ta, tb))
        hi = np.where(par, np.inf, np.maximum(ta, tb))
        if not 0.0 <= o <= upper[a]:
            hi = np.where(par, -np.inf, hi)
        s0 = np.maximum(s0, lo)
        s1 = np.minimum(s1, hi)
    return s0, s1


def ray_integrals(vol, origin, dirs, max_step, s_max):
    """Midpoint-rule line integrals along rays from ``origin``.

    Each ray's chord through the grid box is split into the smallest number
    of equal steps not longer than ``max_step``.
    """
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    s0, s1 = clip_rays(vol.shape, origin, dirs, s_max)
    length = np.where(s1 > s0, s1 - s0, 0.0)
    nstep = np.ceil(length / max_step).astype(np.int64)
    out = np.zeros(dirs.shape[0])
    for start in range(0, dirs.shape[0], CHUNK):
        sl = slice(start, start + CHUNK)
        n = nstep[sl]
        kmax = int(n.max(initial=0))
        if kmax == 0:
            continue
        h = np.where(n > 0, length[sl] / np.maximum(n, 1), 0.0)
        k = np.arange(kmax) + 0.5
        s = s0[sl, None] + k[None, :] * h[:, None]
        pts = origin + s[..., None] * dirs[sl, None, :]
        vals = trilinear_points(vol, pts)
        vals = np.where(k[None, :] < n[:, None], vals, 0.0)
        out[sl] = vals.sum(axis=1) * h
    return out
