# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-vertex kernels; see ``_kernels_py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, isfinite

cnp.import_array()


def accumulate_normals(positions, triangles):
    cdef double[:, ::1] X = np.ascontiguousarray(positions, dtype=np.float64)
    cdef long long[:, ::1] T = np.ascontiguousarray(triangles, dtype=np.int64)
    cdef Py_ssize_t n = X.shape[0], nt = T.shape[0], f
    out_arr = np.zeros((n, 3))
    cdef double[:, ::1] out = out_arr
    cdef long long a, b, c
    cdef double e1x, e1y, e1z, e2x, e2y, e2z, fx, fy, fz
    with nogil:
        for f in range(nt):
            a = T[f, 0]
            b = T[f, 1]
            c = T[f, 2]
            e1x = X[b, 0] - X[a, 0]
            e1y = X[b, 1] - X[a, 1]
            e1z = X[b, 2] - X[a, 2]
            e2x = X[c, 0] - X[a, 0]
            e2y = X[c, 1] - X[a, 1]
            e2z = X[c, 2] - X[a, 2]
            fx = e1y * e2z - e1z * e2y
            fy = e1z * e2x - e1x * e2z
            fz = e1x * e2y - e1y * e2x
            out[a, 0] += fx
            out[a, 1] += fy
            out[a, 2] += fz
            out[b, 0] += fx
            out[b, 1] += fy
            out[b, 2] += fz
            out[c, 0] += fx
            out[c, 1] += fy
            out[c, 2] += fz
    return out_arr


def normals_backward(positions, triangles, grad_accum):
    cdef double[:, ::1] X = np.ascontiguousarray(positions, dtype=np.float64)
    cdef long long[:, ::1] T = np.ascontiguousarray(triangles, dtype=np.int64)
    cdef double[:, ::1] G = np.ascontiguousarray(grad_accum, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], nt = T.shape[0], f
    out_arr = np.zeros((n, 3))
    cdef double[:, ::1] out = out_arr
    cdef long long a, b, c
    cdef double e1x, e1y, e1z, e2x, e2y, e2z, gx, gy, gz
    cdef double g1x, g1y, g1z, g2x, g2y, g2z
    with nogil:
        for f in range(nt):
            a = T[f, 0]
            b = T[f, 1]
            c = T[f, 2]
            e1x = X[b, 0] - X[a, 0]
            e1y = X[b, 1] - X[a, 1]
            e1z = X[b, 2] - X[a, 2]
            e2x = X[c, 0] - X[a, 0]
            e2y = X[c, 1] - X[a, 1]
            e2z = X[c, 2] - X[a, 2]
            gx = G[a, 0] + G[b, 0] + G[c, 0]
            gy = G[a, 1] + G[b, 1] + G[c, 1]
            gz = G[a, 2] + G[b, 2] + G[c, 2]
            # e2 x g
            g1x = e2y * gz - e2z * gy
            g1y = e2z * gx - e2x * gz
            g1z = e2x * gy - e2y * gx
            # g x e1
            g2x = gy * e1z - gz * e1y
            g2y = gz * e1x - gx * e1z
            g2z = gx * e1y - gy * e1x
            out[b, 0] += g1x
            out[b, 1] += g1y
            out[b, 2] += g1z
            out[c, 0] += g2x
            out[c, 1] += g2y
            out[c, 2] += g2z
            out[a, 0] -= g1x + g2x
            out[a, 1] -= g1y + g2y
            out[a, 2] -= g1z + g2z
    return out_arr


def bilinear_gather(image, uv, cells=None):
    cdef double[:, :, ::1] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef double[:, ::1] UV = np.ascontiguousarray(uv, dtype=np.float64)
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], n = UV.shape[0], i, k
    cdef bint given = cells is not None
    if given:
        cells_arr = np.array(cells, dtype=np.int64, order="C", copy=True)
    else:
        cells_arr = np.empty((n, 2), dtype=np.int64)
    cdef long long[:, ::1] C = cells_arr
    values_arr = np.zeros((n, 3))
    du_arr = np.zeros((n, 3))
    dv_arr = np.zeros((n, 3))
    valid_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] V = values_arr
    cdef double[:, ::1] DU = du_arr
    cdef double[:, ::1] DV = dv_arr
    cdef unsigned char[::1] ok = valid_arr
    cdef double x, y, fx, fy, a00, a01, a10, a11, top, bottom
    cdef long long x0, y0
    with nogil:
        for i in range(n):
            x = UV[i, 0] - 0.5
            y = UV[i, 1] - 0.5
            if not given:
                if isfinite(x) and isfinite(y):
                    x0 = <long long>floor(min(max(x, -2.0), w + 1.0))
                    y0 = <long long>floor(min(max(y, -2.0), h + 1.0))
                else:
                    x0 = -2
                    y0 = -2
                C[i, 0] = x0
                C[i, 1] = y0
            else:
                x0 = C[i, 0]
                y0 = C[i, 1]
            if x0 < 0 or x0 + 1 > w - 1 or y0 < 0 or y0 + 1 > h - 1:
                continue
            if not (isfinite(x) and isfinite(y)):
                continue
            ok[i] = 1
            fx = x - x0
            fy = y - y0
            for k in range(3):
                a00 = img[y0, x0, k]
                a01 = img[y0, x0 + 1, k]
                a10 = img[y0 + 1, x0, k]
                a11 = img[y0 + 1, x0 + 1, k]
                top = a00 + fx * (a01 - a00)
                bottom = a10 + fx * (a11 - a10)
                V[i, k] = top + fy * (bottom - top)
                DU[i, k] = (1.0 - fy) * (a01 - a00) + fy * (a11 - a10)
                DV[i, k] = bottom - top
    return values_arr, du_arr, dv_arr, cells_arr, valid_arr.astype(bool)


def splat_zbuffer(uv, depth, colors, mask, int height, int width):
    cdef double[:, ::1] UV = np.ascontiguousarray(uv, dtype=np.float64)
    cdef double[::1] D = np.ascontiguousarray(depth, dtype=np.float64)
    cdef double[:, ::1] Cl = np.ascontiguousarray(colors, dtype=np.float64)
    cdef unsigned char[::1] M = np.ascontiguousarray(mask, dtype=np.uint8)
    image_arr = np.zeros((height, width, 3))
    zbuf_arr = np.full((height, width), np.inf)
    index_arr = np.full((height, width), -1, dtype=np.int64)
    cdef double[:, :, ::1] img = image_arr
    cdef double[:, ::1] zb = zbuf_arr
    cdef long long[:, ::1] idx = index_arr
    cdef Py_ssize_t n = UV.shape[0], i
    cdef double fu, fv
    cdef long long r, c
    with nogil:
        for i in range(n):
            if not M[i]:
                continue
            fu = floor(UV[i, 0])
            fv = floor(UV[i, 1])
            if not (fu >= 0 and fu < width and fv >= 0 and fv < height):
                continue
            c = <long long>fu
            r = <long long>fv
            # strict < keeps the lower index on depth ties
            if idx[r, c] < 0 or D[i] < zb[r, c]:
                zb[r, c] = D[i]
                idx[r, c] = i
                img[r, c, 0] = Cl[i, 0]
                img[r, c, 1] = Cl[i, 1]
                img[r, c, 2] = Cl[i, 2]
    return image_arr, zbuf_arr, index_arr
