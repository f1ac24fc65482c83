# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ray-casting kernels; see drr_py for the reference semantics."""

import numpy as np
from libc.math cimport floor, ceil, INFINITY


cdef inline double _tri(const double[:, :, ::1] v, double x, double y, double z,
                        Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz) noexcept nogil:
    cdef Py_ssize_t x0, y0, z0, x1, y1, z1
    cdef double fx, fy, fz, gx, gy, gz
    if x < 0.0 or y < 0.0 or z < 0.0 or x > nx - 1 or y > ny - 1 or z > nz - 1:
        return 0.0
    x0 = <Py_ssize_t>floor(x)
    y0 = <Py_ssize_t>floor(y)
    z0 = <Py_ssize_t>floor(z)
    if x0 > nx - 2:
        x0 = nx - 2 if nx > 1 else 0
    if y0 > ny - 2:
        y0 = ny - 2 if ny > 1 else 0
    if z0 > nz - 2:
        z0 = nz - 2 if nz > 1 else 0
    fx = x - x0
    fy = y - y0
    fz = z - z0
    x1 = x0 + 1 if x0 + 1 < nx else nx - 1
    y1 = y0 + 1 if y0 + 1 < ny else ny - 1
    z1 = z0 + 1 if z0 + 1 < nz else nz - 1
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    return (gx * (gy * (gz * v[x0, y0, z0] + fz * v[x0, y0, z1])
                  + fy * (gz * v[x0, y1, z0] + fz * v[x0, y1, z1]))
            + fx * (gy * (gz * v[x1, y0, z0] + fz * v[x1, y0, z1])
                    + fy * (gz * v[x1, y1, z0] + fz * v[x1, y1, z1])))


def trilinear_points(vol, pts):
    cdef const double[:, :, ::1] v = np.ascontiguousarray(vol, dtype=np.float64)
    p_arr = np.ascontiguousarray(pts, dtype=np.float64)
    shape = p_arr.shape[:-1]
    cdef const double[:, ::1] p = p_arr.reshape(-1, 3)
    cdef Py_ssize_t m = p.shape[0], i
    out = np.empty(m)
    cdef double[::1] o = out
    cdef Py_ssize_t nx = v.shape[0], ny = v.shape[1], nz = v.shape[2]
    with nogil:
        for i in range(m):
            o[i] = _tri(v, p[i, 0], p[i, 1], p[i, 2], nx, ny, nz)
    return out.reshape(shape)


cdef inline bint _clip(double o, double d, double upper, double* s0, double* s1) noexcept nogil:
    cdef double ta, tb, lo, hi
    if d == 0.0:
        return 0.0 <= o <= upper
    ta = (0.0 - o) / d
    tb = (upper - o) / d
    if ta < tb:
        lo = ta
        hi = tb
    else:
        lo = tb
        hi = ta
    if lo > s0[0]:
        s0[0] = lo
    if hi < s1[0]:
        s1[0] = hi
    return True


def ray_integrals(vol, origin, dirs, double max_step, double s_max):
    cdef const double[:, :, ::1] v = np.ascontiguousarray(vol, dtype=np.float64)
    cdef const double[::1] org = np.ascontiguousarray(origin, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef Py_ssize_t nx = v.shape[0], ny = v.shape[1], nz = v.shape[2]
    cdef Py_ssize_t m = d.shape[0], r, k, n
    cdef double s0, s1, length, h, s, acc
    out = np.zeros(m)
    cdef double[::1] o = out
    with nogil:
        for r in range(m):
            s0 = 0.0
            s1 = s_max
            if not _clip(org[0], d[r, 0], nx - 1.0, &s0, &s1):
                continue
            if not _clip(org[1], d[r, 1], ny - 1.0, &s0, &s1):
                continue
            if not _clip(org[2], d[r, 2], nz - 1.0, &s0, &s1):
                continue
            if s1 <= s0:
                continue
            length = s1 - s0
            n = <Py_ssize_t>ceil(length / max_step)
            if n <= 0:
                continue
            h = length / n
            acc = 0.0
            for k in range(n):
                s = s0 + (k + 0.5) * h
                acc = acc + _tri(v, org[0] + s * d[r, 0], org[1] + s * d[r, 1],
                                 org[2] + s * d[r, 2], nx, ny, nz)
            o[r] = acc * h
    return out
