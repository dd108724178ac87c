"""Forward image formation: rigid motion, pinhole projection, SH shading.

Camera convention: right-handed, camera at the origin looking down -z, image
``u`` to the right and ``v`` downward. A point in front of the camera has
``z < 0`` and depth ``-z``::

    u = W/2 - f x / z        v = H/2 + f y / z
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import splu

from . import kernels
from .model import Mesh

SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
SH_C1 = 0.4886025119029199  # sqrt(3 / (4 pi))
SH_C2 = 1.0925484305920792  # sqrt(15 / (4 pi))
SH_C3 = 0.31539156525252005  # sqrt(5 / (16 pi))
SH_C4 = 0.5462742152960396  # sqrt(15 / (16 pi))

TAYLOR_THRESHOLD = 1e-8
UNIT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    focal_length: float | None = None
    near: float = 1e-3
    far: float = 1e3

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.focal_length is None:
            object.__setattr__(self, "focal_length", 1.5 * max(self.width, self.height))
        if not self.focal_length > 0:
            raise ValueError("focal_length must be positive")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")

    @property
    def principal_point(self):
        return (self.width / 2.0, self.height / 2.0)


@dataclass
class RigidPose:
    omega: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.zeros(3))


@dataclass
class ProjectedVertices:
    uv: np.ndarray
    depth: np.ndarray
    in_frustum: np.ndarray


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(omega) -> np.ndarray:
    """Rodrigues' formula; second-order Taylor expansion for tiny angles."""
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < TAYLOR_THRESHOLD:
        return np.eye(3) + k + 0.5 * (k @ k)
    k = k / theta
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def rotation_jacobian(omega) -> np.ndarray:
    """``dR/domega_i`` stacked as a (3, 3, 3) array, index ``[i]`` for ``omega_i``.

    Uses the compact closed form
    ``dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2``.
    """
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    theta2 = float(w @ w)
    eye = np.eye(3)
    if theta2 < TAYLOR_THRESHOLD**2:
        kw = skew(w)
        return np.stack([skew(e) + 0.5 * (skew(e) @ kw + kw @ skew(e)) for e in eye])
    rot = rotation_from_axis_angle(w)
    kw = skew(w)
    out = np.empty((3, 3, 3))
    for i in range(3):
        out[i] = (w[i] * kw + skew(np.cross(w, (eye - rot)[:, i]))) @ rot / theta2
    return out


def canonicalize_axis_angle(omega) -> np.ndarray:
    """Equivalent axis-angle vector with norm below pi."""
    w = np.asarray(omega, dtype=np.float64).reshape(3).copy()
    theta = np.linalg.norm(w)
    if theta < np.pi:
        return w
    axis = w / theta
    theta = np.mod(theta, 2 * np.pi)
    if theta >= np.pi:
        theta -= 2 * np.pi
    return axis * theta


def transform_points(positions, pose: RigidPose) -> np.ndarray:
    rot = rotation_from_axis_angle(pose.omega)
    return np.asarray(positions, dtype=np.float64) @ rot.T + pose.t


def project(positions, camera: Camera) -> ProjectedVertices:
    """Pinhole projection of camera-space points."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    depth = -p[:, 2]
    cx, cy = camera.principal_point
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cx + camera.focal_length * p[:, 0] / depth
        v = cy - camera.focal_length * p[:, 1] / depth
    uv = np.stack([u, v], axis=1)
    in_frustum = (
        (depth > camera.near) & (depth < camera.far)
        & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    )
    return ProjectedVertices(uv, depth, in_frustum)


def projection_jacobian(positions, camera: Camera):
    """``(du/dp, dv/dp)`` per point, each (N, 3)."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    d = -p[:, 2]
    f = camera.focal_length
    du = np.stack([f / d, np.zeros_like(d), f * p[:, 0] / d**2], axis=1)
    dv = np.stack([np.zeros_like(d), -f / d, -f * p[:, 1] / d**2], axis=1)
    return du, dv


def _check_unit(n):
    norms = np.linalg.norm(n, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise ValueError("sh_basis expects unit normals")


def sh_basis(normal) -> np.ndarray:
    """Real SH basis, bands 0-2, for one unit normal (9,) or many (N, 9).

    Order: (0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2).
    """
    n = np.asarray(normal, dtype=np.float64)
    _check_unit(n)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack(
        [
            np.full_like(x, SH_C0),
            SH_C1 * y,
            SH_C1 * z,
            SH_C1 * x,
            SH_C2 * x * y,
            SH_C2 * y * z,
            SH_C3 * (3.0 * z * z - 1.0),
            SH_C2 * x * z,
            SH_C4 * (x * x - y * y),
        ],
        axis=-1,
    )


def sh_basis_gradient(normals) -> np.ndarray:
    """Derivative of each SH polynomial w.r.t. (x, y, z): shape (N, 9, 3)."""
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    zero = np.zeros_like(x)
    g = np.empty((n.shape[0], 9, 3))
    g[:, 0] = 0.0
    g[:, 1] = np.stack([zero, zero + SH_C1, zero], axis=1)
    g[:, 2] = np.stack([zero, zero, zero + SH_C1], axis=1)
    g[:, 3] = np.stack([zero + SH_C1, zero, zero], axis=1)
    g[:, 4] = SH_C2 * np.stack([y, x, zero], axis=1)
    g[:, 5] = SH_C2 * np.stack([zero, z, y], axis=1)
    g[:, 6] = SH_C3 * np.stack([zero, zero, 6.0 * z], axis=1)
    g[:, 7] = SH_C2 * np.stack([z, zero, x], axis=1)
    g[:, 8] = SH_C4 * np.stack([2.0 * x, -2.0 * y, zero], axis=1)
    return g


def shade_vertices(reflectance, normals, omega, gamma) -> np.ndarray:
    """Lambertian SH shading ``c_ik = b_ik * sum_j gamma_kj H_j(R n_i)``."""
    rot = rotation_from_axis_angle(omega)
    h = sh_basis(np.asarray(normals, dtype=np.float64) @ rot.T)
    g = np.asarray(gamma, dtype=np.float64).reshape(3, 9)
    return np.asarray(reflectance, dtype=np.float64) * (h @ g.T)


def visibility_mask(normals, omega, projected: ProjectedVertices):
    """Vertices inside the frustum whose rotated normal points toward the camera (+z)."""
    rot = rotation_from_axis_angle(omega)
    nz = np.asarray(normals, dtype=np.float64) @ rot[2]
    mask = projected.in_frustum & (nz > 0.0)
    return mask, int(mask.sum())


def bilinear_sample(image, uv):
    """Bilinear sample at one point ``(u, v)``; returns ``(rgb, valid)``."""
    values, _, _, _, valid = kernels.bilinear_gather(image, np.asarray(uv, dtype=np.float64).reshape(1, 2))
    return values[0], bool(valid[0])


def _shaded(mesh: Mesh, pose: RigidPose, gamma):
    if mesh.shaded_colors is not None:
        return mesh.shaded_colors
    return shade_vertices(mesh.reflectance, mesh.normals, pose.omega, gamma)


def render_pointsplat(mesh: Mesh, pose: RigidPose, camera: Camera, gamma, background=0.0):
    """Nearest-pixel z-buffered splat of the visible vertices.

    Returns ``(image, coverage)`` with image shape (H, W, 3). Debug/synthesis
    only; the losses never see this image directly.
    """
    colors = _shaded(mesh, pose, gamma)
    cam_pts = transform_points(mesh.positions, pose)
    proj = project(cam_pts, camera)
    vis, _ = visibility_mask(mesh.normals, pose.omega, proj)
    image, _, index = kernels.splat_zbuffer(proj.uv, proj.depth, colors, vis, camera.height, camera.width)
    coverage = index >= 0
    image[~coverage] = background
    return image, coverage


def _laplacian_system(unknown, background):
    """Five-point Laplacian rows centered at unknown pixels.

    Returns ``(A, b, index_map)`` with ``L I = A x + b`` where ``x`` stacks the
    unknown pixels and known pixels are fixed to ``background``.
    """
    h, w = unknown.shape
    idx = np.full((h, w), -1, dtype=np.int64)
    rows_y, rows_x = np.nonzero(unknown)
    n = rows_y.size
    idx[rows_y, rows_x] = np.arange(n)
    r_list, c_list, v_list = [], [], []
    b = np.zeros((n, 3))
    centre = np.zeros(n)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = rows_y + dy, rows_x + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        centre -= inside
        r = np.flatnonzero(inside)
        nb = idx[ny[r], nx[r]]
        is_unknown = nb >= 0
        r_list.append(r[is_unknown])
        c_list.append(nb[is_unknown])
        v_list.append(np.ones(int(is_unknown.sum())))
        b[r[~is_unknown]] += background[ny[r[~is_unknown]], nx[r[~is_unknown]]]
    r_list.append(np.arange(n))
    c_list.append(np.arange(n))
    v_list.append(centre)
    a = sp.csr_matrix((np.concatenate(v_list), (np.concatenate(r_list), np.concatenate(c_list))), shape=(n, n))
    return a, b, idx


def rasterize_triangles(uv, triangles, height, width):
    """Boolean mask of pixels whose centers fall inside any of the 2D triangles."""
    mask = np.zeros((height, width), dtype=bool)
    for a, b, c in uv[np.asarray(triangles, dtype=np.int64)]:
        lo = np.floor(np.minimum(np.minimum(a, b), c) - 0.5).astype(int)
        hi = np.ceil(np.maximum(np.maximum(a, b), c) - 0.5).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], width - 1), min(hi[1], height - 1)
        if x1 < x0 or y1 < y0:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        e = []
        for p, q in ((a, b), (b, c), (c, a)):
            e.append((q[0] - p[0]) * (py - p[1]) - (q[1] - p[1]) * (px - p[0]))
        inside = ((e[0] >= 0) & (e[1] >= 0) & (e[2] >= 0)) | ((e[0] <= 0) & (e[1] <= 0) & (e[2] <= 0))
        mask[y0:y1 + 1, x0:x1 + 1] |= inside
    return mask


def render_interpolated(mesh: Mesh, pose: RigidPose, camera: Camera, gamma, background=0.0,
                        margin=0, penalty=1e3, max_rounds=40, tol=1e-13):
    """Dense render whose bilinear samples at visible vertices equal their colors.

    The face region (rasterized triangles whose corners are all visible, plus
    the bilinear cells of visible vertices, hole-filled) is filled with the
    smoothest image (minimum squared Laplacian) subject to the bilinear
    interpolation constraints at every visible vertex; pixels outside keep the
    background. ``margin`` grows the filled region by that many pixels so
    vertices on the silhouette do not sit on the edge of the background.
    Constraints are enforced by a method-of-multipliers loop on a
    single sparse factorization. Returns ``(image, coverage)``.
    """
    colors = _shaded(mesh, pose, gamma)
    cam_pts = transform_points(mesh.positions, pose)
    proj = project(cam_pts, camera)
    vis, _ = visibility_mask(mesh.normals, pose.omega, proj)
    h, w = camera.height, camera.width
    bg = np.empty((h, w, 3))
    bg[...] = background

    _, _, _, cells, valid = kernels.bilinear_gather(bg, proj.uv)
    sel = np.flatnonzero(vis & valid)
    if sel.size == 0:
        return bg, np.zeros((h, w), dtype=bool)
    cx, cy = cells[sel, 0], cells[sel, 1]
    if mesh.triangles is not None:
        tri = np.asarray(mesh.triangles)
        region = rasterize_triangles(proj.uv, tri[vis[tri].all(axis=1)], h, w)
    else:
        # no connectivity: close the splat coverage instead
        _, _, index = kernels.splat_zbuffer(proj.uv, proj.depth, colors, vis, h, w)
        region = ndimage.binary_closing(index >= 0, structure=np.ones((3, 3)), iterations=3, border_value=0)
    for dy in (0, 1):
        for dx in (0, 1):
            region[cy + dy, cx + dx] = True
    region = ndimage.binary_fill_holes(region)
    if margin > 0:
        region = ndimage.binary_dilation(region, iterations=int(margin))

    lap, lap_b, idx = _laplacian_system(region, bg)
    n = lap.shape[0]
    fx = proj.uv[sel, 0] - 0.5 - cx
    fy = proj.uv[sel, 1] - 0.5 - cy
    weights = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    cols = [idx[cy, cx], idx[cy, cx + 1], idx[cy + 1, cx], idx[cy + 1, cx + 1]]
    m = sel.size
    wmat = sp.csr_matrix(
        (np.concatenate(weights), (np.tile(np.arange(m), 4), np.concatenate(cols))), shape=(m, n)
    )
    target = colors[sel]
    system = (lap.T @ lap + penalty * (wmat.T @ wmat) + 1e-10 * sp.identity(n)).tocsc()
    # symmetric positive definite: symmetric ordering, no pivoting
    solver = splu(system, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    base_rhs = -(lap.T @ lap_b) + 1e-10 * bg[region]
    shift = np.zeros_like(target)
    x = None
    for _ in range(max_rounds):
        x = solver.solve(base_rhs + penalty * (wmat.T @ (target + shift)))
        resid = target - wmat @ x
        if np.max(np.abs(resid)) < tol:
            break
        shift += resid
    image = bg.copy()
    image[region] = x
    return image, region
