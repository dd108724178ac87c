"""Pure numpy implementations of the per-vertex hot kernels.

These are the reference implementations; ``_ckernels.pyx`` mirrors every
function here with identical signatures and results.
"""

import numpy as np


def accumulate_normals(positions, triangles):
    """Sum of un-normalized (area-weighted) face normals incident to each vertex."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    tri = np.ascontiguousarray(triangles, dtype=np.int64)
    n = positions.shape[0]
    accum = np.zeros((n, 3))
    if tri.shape[0] == 0:
        return accum
    a = positions[tri[:, 0]]
    e1 = positions[tri[:, 1]] - a
    e2 = positions[tri[:, 2]] - a
    face = np.cross(e1, e2)
    for corner in range(3):
        idx = tri[:, corner]
        for k in range(3):
            accum[:, k] += np.bincount(idx, weights=face[:, k], minlength=n)
    return accum


def normals_backward(positions, triangles, grad_accum):
    """Back-propagate a gradient on the accumulated normals to vertex positions."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    tri = np.ascontiguousarray(triangles, dtype=np.int64)
    g = np.ascontiguousarray(grad_accum, dtype=np.float64)
    n = positions.shape[0]
    out = np.zeros((n, 3))
    if tri.shape[0] == 0:
        return out
    a = positions[tri[:, 0]]
    e1 = positions[tri[:, 1]] - a
    e2 = positions[tri[:, 2]] - a
    g_face = g[tri[:, 0]] + g[tri[:, 1]] + g[tri[:, 2]]
    # face = e1 x e2  =>  dL/de1 = e2 x gF, dL/de2 = gF x e1
    g_e1 = np.cross(e2, g_face)
    g_e2 = np.cross(g_face, e1)
    for idx, contrib in ((tri[:, 1], g_e1), (tri[:, 2], g_e2), (tri[:, 0], -(g_e1 + g_e2))):
        for k in range(3):
            out[:, k] += np.bincount(idx, weights=contrib[:, k], minlength=n)
    return out


def bilinear_gather(image, uv, cells=None):
    """Bilinear samples and their uv-derivatives at continuous pixel coordinates.

    Pixel ``(row i, col j)`` has its center at ``(u, v) = (j + 0.5, i + 0.5)``.
    When ``cells`` is given, the 2x2 cell for every point is taken from it
    instead of being located from ``uv`` (the interpolant is then extended
    affinely-per-axis outside the cell).

    Returns ``values, d_du, d_dv, cells, valid``.
    """
    image = np.ascontiguousarray(image, dtype=np.float64)
    uv = np.ascontiguousarray(uv, dtype=np.float64)
    h, w = image.shape[:2]
    x = uv[:, 0] - 0.5
    y = uv[:, 1] - 0.5
    if cells is None:
        finite = np.isfinite(x) & np.isfinite(y)
        xs = np.where(finite, x, -10.0)
        ys = np.where(finite, y, -10.0)
        x0 = np.floor(np.clip(xs, -2.0, w + 1.0)).astype(np.int64)
        y0 = np.floor(np.clip(ys, -2.0, h + 1.0)).astype(np.int64)
        cells = np.stack([x0, y0], axis=1)
    else:
        cells = np.ascontiguousarray(cells, dtype=np.int64)
        x0 = cells[:, 0]
        y0 = cells[:, 1]
    valid = (x0 >= 0) & (x0 + 1 <= w - 1) & (y0 >= 0) & (y0 + 1 <= h - 1)
    valid &= np.isfinite(x) & np.isfinite(y)
    xc = np.where(valid, x0, 0)
    yc = np.where(valid, y0, 0)
    fx = np.where(valid, x - xc, 0.0)[:, None]
    fy = np.where(valid, y - yc, 0.0)[:, None]
    i00 = image[yc, xc]
    i01 = image[yc, xc + 1]
    i10 = image[yc + 1, xc]
    i11 = image[yc + 1, xc + 1]
    top = i00 + fx * (i01 - i00)
    bottom = i10 + fx * (i11 - i10)
    values = top + fy * (bottom - top)
    d_du = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    d_dv = bottom - top
    mask = valid[:, None]
    values = np.where(mask, values, 0.0)
    d_du = np.where(mask, d_du, 0.0)
    d_dv = np.where(mask, d_dv, 0.0)
    return values, d_du, d_dv, cells, valid


def splat_zbuffer(uv, depth, colors, mask, height, width):
    """Nearest-pixel z-buffered splat of the masked points.

    Returns ``image, zbuffer, index`` where ``index`` holds the winning vertex
    per pixel (-1 when uncovered). Ties in depth go to the lower vertex index.
    """
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    image = np.zeros((height, width, 3))
    zbuf = np.full((height, width), np.inf)
    index = np.full((height, width), -1, dtype=np.int64)
    sel = np.flatnonzero(np.asarray(mask, dtype=bool))
    if sel.size == 0:
        return image, zbuf, index
    col = np.floor(uv[sel, 0]).astype(np.int64)
    row = np.floor(uv[sel, 1]).astype(np.int64)
    inside = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    sel, col, row = sel[inside], col[inside], row[inside]
    if sel.size == 0:
        return image, zbuf, index
    pix = row * width + col
    order = np.lexsort((sel, depth[sel], pix))
    pix_sorted = pix[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    p = pix[win]
    v = sel[win]
    index.flat[p] = v
    zbuf.flat[p] = depth[v]
    image.reshape(-1, 3)[p] = colors[v]
    return image, zbuf, index
