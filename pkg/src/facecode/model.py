"""Statistical face model: code vectors, morphable basis, mesh evaluation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

from . import kernels

N_ID = 80
N_EXP = 64
N_TEX = 80
N_SH = 27
N_LANDMARKS = 48
CODE_DIM = N_ID + N_TEX + N_EXP + N_SH + 3 + 3

# slices into the flat 257-vector [alpha | beta | delta | gamma | omega | t]
SLICE_ALPHA = slice(0, 80)
SLICE_BETA = slice(80, 160)
SLICE_DELTA = slice(160, 224)
SLICE_GAMMA = slice(224, 251)
SLICE_OMEGA = slice(251, 254)
SLICE_T = slice(254, 257)
BLOCKS = {
    "alpha": SLICE_ALPHA,
    "beta": SLICE_BETA,
    "delta": SLICE_DELTA,
    "gamma": SLICE_GAMMA,
    "omega": SLICE_OMEGA,
    "t": SLICE_T,
}

DEGENERATE_NORM = 1e-12


class DimensionError(ValueError):
    """Coefficient or array shapes do not match the model."""


def _vec(x, n, name):
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.shape[0] != n:
        raise DimensionError(f"{name} must have {n} entries, got {a.shape[0]}")
    return a


@dataclass
class CodeVector:
    """The 257-d description of one face image.

    ``gamma`` is laid out channel-major: 9 SH coefficients for R, then G, then B.
    """

    alpha: np.ndarray = field(default_factory=lambda: np.zeros(N_ID))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(N_TEX))
    delta: np.ndarray = field(default_factory=lambda: np.zeros(N_EXP))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(N_SH))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.alpha = _vec(self.alpha, N_ID, "alpha")
        self.beta = _vec(self.beta, N_TEX, "beta")
        self.delta = _vec(self.delta, N_EXP, "delta")
        self.gamma = _vec(self.gamma, N_SH, "gamma")
        self.omega = _vec(self.omega, 3, "omega")
        self.t = _vec(self.t, 3, "t")

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta, self.delta, self.gamma, self.omega, self.t])

    @classmethod
    def from_array(cls, vec) -> "CodeVector":
        v = _vec(vec, CODE_DIM, "code vector")
        return cls(*(v[s].copy() for s in BLOCKS.values()))

    def copy(self) -> "CodeVector":
        return CodeVector.from_array(self.to_array())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_array())))


@dataclass
class MorphableBasis:
    """PCA face model. Components are stored as ``(K, N, 3)`` arrays."""

    mean_geometry: np.ndarray
    mean_expression: np.ndarray
    geometry_components: np.ndarray
    sigma_id: np.ndarray
    expression_components: np.ndarray
    sigma_exp: np.ndarray
    mean_reflectance: np.ndarray
    reflectance_components: np.ndarray
    sigma_tex: np.ndarray
    triangles: np.ndarray
    landmark_vertex_indices: np.ndarray

    def __post_init__(self):
        f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
        self.mean_geometry = f64(self.mean_geometry)
        self.mean_expression = f64(self.mean_expression)
        self.geometry_components = f64(self.geometry_components)
        self.expression_components = f64(self.expression_components)
        self.mean_reflectance = f64(self.mean_reflectance)
        self.reflectance_components = f64(self.reflectance_components)
        self.sigma_id = f64(self.sigma_id)
        self.sigma_exp = f64(self.sigma_exp)
        self.sigma_tex = f64(self.sigma_tex)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.landmark_vertex_indices = np.ascontiguousarray(self.landmark_vertex_indices, dtype=np.int64)
        self.validate()
        n = self.n_vertices
        # std-scaled flat components, the form every evaluation uses
        self._id_flat = (self.geometry_components * self.sigma_id[:, None, None]).reshape(N_ID, 3 * n)
        self._exp_flat = (self.expression_components * self.sigma_exp[:, None, None]).reshape(N_EXP, 3 * n)
        self._tex_flat = (self.reflectance_components * self.sigma_tex[:, None, None]).reshape(N_TEX, 3 * n)
        self._mean_shape = self.mean_geometry + self.mean_expression

    @property
    def n_vertices(self) -> int:
        return self.mean_geometry.shape[0]

    def validate(self):
        n = self.mean_geometry.shape[0]
        checks = [
            (self.mean_geometry.shape == (n, 3), "mean_geometry must be N x 3"),
            (self.mean_expression.shape == (n, 3), "mean_expression must be N x 3"),
            (self.mean_reflectance.shape == (n, 3), "mean_reflectance must be N x 3"),
            (self.geometry_components.shape == (N_ID, n, 3), "geometry_components must be 80 x N x 3"),
            (self.expression_components.shape == (N_EXP, n, 3), "expression_components must be 64 x N x 3"),
            (self.reflectance_components.shape == (N_TEX, n, 3), "reflectance_components must be 80 x N x 3"),
            (self.sigma_id.shape == (N_ID,), "sigma_id must have 80 entries"),
            (self.sigma_exp.shape == (N_EXP,), "sigma_exp must have 64 entries"),
            (self.sigma_tex.shape == (N_TEX,), "sigma_tex must have 80 entries"),
            (self.landmark_vertex_indices.shape == (N_LANDMARKS,), "need exactly 48 landmark indices"),
        ]
        for ok, msg in checks:
            if not ok:
                raise DimensionError(msg)
        for name in ("sigma_id", "sigma_exp", "sigma_tex"):
            if not np.all(getattr(self, name) > 0):
                raise ValueError(f"{name} must be strictly positive")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle index out of range")
        lm = self.landmark_vertex_indices
        if lm.min() < 0 or lm.max() >= n:
            raise ValueError("landmark index out of range")

    # flat std-scaled components, (K, 3N); read-only views for gradient code
    @property
    def id_flat(self):
        return self._id_flat

    @property
    def exp_flat(self):
        return self._exp_flat

    @property
    def tex_flat(self):
        return self._tex_flat

    def __eq__(self, other):
        if not isinstance(other, MorphableBasis):
            return NotImplemented
        names = [
            "mean_geometry", "mean_expression", "geometry_components", "sigma_id",
            "expression_components", "sigma_exp", "mean_reflectance",
            "reflectance_components", "sigma_tex", "triangles", "landmark_vertex_indices",
        ]
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in names)


@dataclass
class Mesh:
    positions: np.ndarray
    reflectance: np.ndarray
    normals: np.ndarray
    degenerate: np.ndarray
    shaded_colors: np.ndarray | None = None
    triangles: np.ndarray | None = None


def evaluate_geometry(basis: MorphableBasis, alpha, delta) -> np.ndarray:
    """Vertex positions ``A_id + A_exp + sum alpha_i s_i P_i + sum delta_i s_i Q_i``."""
    a = _vec(alpha, N_ID, "alpha")
    d = _vec(delta, N_EXP, "delta")
    offset = a @ basis.id_flat + d @ basis.exp_flat
    return basis._mean_shape + offset.reshape(-1, 3)


def evaluate_reflectance(basis: MorphableBasis, beta) -> np.ndarray:
    """Per-vertex reflectance. Not clamped; clamping belongs to image export."""
    b = _vec(beta, N_TEX, "beta")
    return basis.mean_reflectance + (b @ basis.tex_flat).reshape(-1, 3)


def compute_vertex_normals(positions, triangles):
    """Area-weighted 1-ring vertex normals.

    Returns ``(normals, degenerate)``. Degenerate vertices (no incident
    triangle, or a vanishing normal sum) get ``(0, 0, 1)``.
    """
    normals, degenerate, _, _ = _normals_with_cache(positions, triangles)
    return normals, degenerate


def _normals_with_cache(positions, triangles):
    accum = kernels.accumulate_normals(positions, triangles)
    length = np.sqrt(np.einsum("ij,ij->i", accum, accum))
    degenerate = length < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, length)
    normals = accum / safe[:, None]
    normals[degenerate] = (0.0, 0.0, 1.0)
    return normals, degenerate, accum, safe


def normals_vjp(positions, triangles, normals, degenerate, length, grad_normals):
    """Vector-Jacobian product of :func:`compute_vertex_normals` w.r.t. positions."""
    g = np.where(degenerate[:, None], 0.0, grad_normals)
    # d(m/|m|) = (I - n n^T) dm / |m|
    radial = np.einsum("ij,ij->i", g, normals)
    g_accum = (g - radial[:, None] * normals) / length[:, None]
    return kernels.normals_backward(positions, triangles, g_accum)


def build_mesh(basis: MorphableBasis, code: CodeVector) -> Mesh:
    positions = evaluate_geometry(basis, code.alpha, code.delta)
    normals, degenerate = compute_vertex_normals(positions, basis.triangles)
    return Mesh(positions, evaluate_reflectance(basis, code.beta), normals, degenerate, triangles=basis.triangles)


# --------------------------------------------------------------------------
# synthetic basis

# canonical frontal layout of the 48 landmarks in head-radius units; order
# follows the 48-of-68 subset table (brows, eye corners, nose, mouth, chin)
def _landmark_layout():
    pts = []
    for side in (-1, 1):
        xs = [0.52, 0.42, 0.32, 0.22, 0.12] if side < 0 else [0.12, 0.22, 0.32, 0.42, 0.52]
        for x in xs:
            pts.append((side * x, 0.40 + 0.08 * (1 - abs(x - 0.32) / 0.2)))
    pts += [(-0.46, 0.24), (-0.14, 0.24), (0.14, 0.24), (0.46, 0.24)]
    pts += [(0.0, 0.16), (0.0, 0.06), (0.0, -0.04), (0.0, -0.14)]
    pts += [(-0.16, -0.22), (-0.08, -0.25), (0.0, -0.27), (0.08, -0.25), (0.16, -0.22)]
    for k in range(12):
        a = np.pi - 2 * np.pi * k / 12
        pts.append((0.30 * np.cos(a), -0.46 + 0.12 * np.sin(a)))
    for k in range(8):
        a = np.pi - 2 * np.pi * k / 8
        pts.append((0.17 * np.cos(a), -0.46 + 0.05 * np.sin(a)))
    pts += [(-0.34, -0.70), (-0.17, -0.78), (0.0, -0.82), (0.17, -0.78), (0.34, -0.70)]
    return np.array(pts)


@dataclass
class SyntheticBasisConfig:
    """Size parameters of the synthetic head model (model units ~ head radius)."""

    radii: tuple = (0.78, 1.0, 0.85)
    id_scale: float = 0.012
    exp_scale: float = 0.01
    tex_scale: float = 0.10
    id_decay_to: float = 0.1
    exp_decay_to: float = 0.25
    tex_decay_to: float = 0.1
    bumps_per_field: int = 3
    bump_width: tuple = (0.35, 0.8)
    mean_expression_scale: float = 0.01
    # darkening of brows and eyes and reddening of lips in the mean albedo
    feature_contrast: float = 0.6


def _paint_features(albedo, points, radii, contrast):
    layout = _landmark_layout() * radii[:2]
    eyes = np.array([layout[10:12].mean(axis=0), layout[12:14].mean(axis=0)])

    def blobs(centers, width):
        d = np.sum((points[:, None, :2] - centers[None]) ** 2, axis=2)
        w = np.exp(-d / (2 * width * width)).max(axis=1)
        return w * (points[:, 2] > 0)

    dark = np.maximum(blobs(layout[:10], 0.05), blobs(eyes, 0.07))
    lips = blobs(layout[23:35], 0.05)
    out = albedo * (1.0 - contrast * dark)[:, None]
    out = out * (1.0 - 0.5 * contrast * lips)[:, None] + (0.5 * contrast * lips)[:, None] * np.array([0.75, 0.25, 0.25])
    return out


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (1.0 + 5.0**0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _bump_fields(rng, dirs, count, bumps, width, weight=None):
    n = dirs.shape[0]
    out = np.empty((count, n, 3))
    for k in range(count):
        f = np.zeros((n, 3))
        for _ in range(bumps):
            c = rng.normal(size=3)
            c /= np.linalg.norm(c)
            s = rng.uniform(*width)
            amp = rng.normal(size=3)
            f += np.exp(-np.sum((dirs - c) ** 2, axis=1) / (2 * s * s))[:, None] * amp
        if weight is not None:
            f *= weight[:, None]
        out[k] = f
    return out


def _orthonormal_rows(fields):
    k = fields.shape[0]
    flat = fields.reshape(k, -1)
    q, r = np.linalg.qr(flat.T)
    # fix signs so the result does not depend on LAPACK sign conventions
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return q.T.reshape(fields.shape)


def _rigid_fields(points):
    """Infinitesimal translations, rotations and uniform scaling of ``points``."""
    out = [np.broadcast_to(e, points.shape) for e in np.eye(3)]
    out += [np.cross(e, points) for e in np.eye(3)]
    out.append(points)
    return np.stack(out).astype(np.float64)


def _remove_span(fields, span, weight=None):
    """Subtract the (optionally vertex-weighted) least-squares projection onto ``span``."""
    k = fields.shape[0]
    w = np.ones(fields.shape[1]) if weight is None else weight
    sw = np.sqrt(np.repeat(w, 3))
    a = span.reshape(span.shape[0], -1).T * sw[:, None]
    b = fields.reshape(k, -1).T * sw[:, None]
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    return fields - (span.reshape(span.shape[0], -1).T @ coef).T.reshape(fields.shape)


def generate_synthetic_basis(seed: int, n_vertices: int = 1000, config: SyntheticBasisConfig | None = None):
    """Deterministic ellipsoidal head model with random smooth PCA components.

    Expression components live on the front of the head and are free of rigid
    motion there; identity components are orthogonal to both rigid motion and
    expression. Each set is orthonormal. The face looks along +z.
    """
    if n_vertices < 4:
        raise ValueError("n_vertices must be at least 4")
    if n_vertices < 3 * N_LANDMARKS:
        raise ValueError(f"n_vertices={n_vertices} too small to carry {N_LANDMARKS} landmarks")
    cfg = config or SyntheticBasisConfig()
    rng = np.random.default_rng(seed)
    dirs = _fibonacci_sphere(n_vertices)
    hull = ConvexHull(dirs)
    tri = hull.simplices.astype(np.int64)
    # orient outward
    centers = dirs[tri].mean(axis=1)
    fn = np.cross(dirs[tri[:, 1]] - dirs[tri[:, 0]], dirs[tri[:, 2]] - dirs[tri[:, 0]])
    flip = np.einsum("ij,ij->i", fn, centers) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    tri = tri[np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))]
    radii = np.asarray(cfg.radii, dtype=np.float64)
    mean_geometry = dirs * radii

    front = 0.5 * (1.0 + np.tanh(4.0 * dirs[:, 2]))
    id_fields = _bump_fields(rng, dirs, N_ID, cfg.bumps_per_field, cfg.bump_width)
    # expression lives on the face only and carries no rigid motion there, so
    # identity can be made orthogonal to it without leaking onto the face
    support = np.clip((dirs[:, 2] - 0.1) / 0.3, 0.0, 1.0) ** 2
    exp_fields = _bump_fields(rng, dirs, N_EXP, cfg.bumps_per_field, (0.2, 0.5), weight=support)
    rigid = _rigid_fields(mean_geometry)
    exp_fields = _remove_span(exp_fields, rigid, support) * support[None, :, None]
    exp = _orthonormal_rows(exp_fields)
    ident = _orthonormal_rows(_remove_span(id_fields, np.concatenate([_orthonormal_rows(rigid), exp])))
    geo = np.concatenate([ident, exp])
    tex = _orthonormal_rows(_bump_fields(rng, dirs, N_TEX, cfg.bumps_per_field, cfg.bump_width))

    sq = np.sqrt(n_vertices)

    def decay(scale, last, k):
        return scale * sq * last ** (np.arange(k) / (k - 1))

    mean_expression = cfg.mean_expression_scale * _bump_fields(rng, dirs, 1, 2, (0.3, 0.5), weight=front)[0]
    base = _bump_fields(rng, dirs, 1, 6, (0.25, 0.6))[0]
    tint = np.array([0.62, 0.48, 0.40])
    mean_reflectance = tint + 0.12 * np.tanh(base)
    if cfg.feature_contrast > 0:
        mean_reflectance = _paint_features(mean_reflectance, mean_geometry, radii, cfg.feature_contrast)
    mean_reflectance = np.clip(mean_reflectance, 0.2, 0.8)

    used = set()
    layout = _landmark_layout() * radii[:2]
    lm = []
    candidates = np.flatnonzero(dirs[:, 2] > 0.15)
    for p in layout:
        d = np.sum((mean_geometry[candidates, :2] - p) ** 2, axis=1)
        for j in np.argsort(d, kind="stable"):
            v = int(candidates[j])
            if v not in used:
                used.add(v)
                lm.append(v)
                break
    if len(lm) < N_LANDMARKS:
        raise ValueError(f"n_vertices={n_vertices} too small to carry {N_LANDMARKS} landmarks")

    return MorphableBasis(
        mean_geometry=mean_geometry,
        mean_expression=mean_expression,
        geometry_components=geo[:N_ID],
        sigma_id=decay(cfg.id_scale, cfg.id_decay_to, N_ID),
        expression_components=geo[N_ID:],
        sigma_exp=decay(cfg.exp_scale, cfg.exp_decay_to, N_EXP),
        mean_reflectance=mean_reflectance,
        reflectance_components=tex,
        sigma_tex=decay(cfg.tex_scale, cfg.tex_decay_to, N_TEX),
        triangles=tri,
        landmark_vertex_indices=np.array(lm),
    )


# --------------------------------------------------------------------------
# FMB1 binary basis format

BASIS_MAGIC = b"FACEMB01"
_HEADER = struct.Struct("<8s6I")


class BasisFormatError(ValueError):
    pass


def write_basis(path, basis: MorphableBasis) -> None:
    n = basis.n_vertices
    t = basis.triangles.shape[0]
    f32 = lambda a: np.asarray(a, dtype="<f4").tobytes()  # noqa: E731
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BASIS_MAGIC, n, t, N_ID, N_EXP, N_TEX, N_LANDMARKS))
        fh.write(f32(basis.mean_geometry))
        fh.write(f32(basis.mean_expression))
        fh.write(f32(basis.sigma_id))
        fh.write(f32(basis.geometry_components))
        fh.write(f32(basis.sigma_exp))
        fh.write(f32(basis.expression_components))
        fh.write(f32(basis.mean_reflectance))
        fh.write(f32(basis.sigma_tex))
        fh.write(f32(basis.reflectance_components))
        fh.write(np.asarray(basis.triangles, dtype="<u4").tobytes())
        fh.write(np.asarray(basis.landmark_vertex_indices, dtype="<u4").tobytes())


def read_basis(path) -> MorphableBasis:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise BasisFormatError("file too short for FMB1 header")
    magic, n, t, n_id, n_exp, n_tex, n_lm = _HEADER.unpack_from(data, 0)
    if magic != BASIS_MAGIC:
        raise BasisFormatError(f"bad magic {magic!r}")
    if (n_id, n_exp, n_tex, n_lm) != (N_ID, N_EXP, N_TEX, N_LANDMARKS):
        raise BasisFormatError(f"unsupported component counts {(n_id, n_exp, n_tex, n_lm)}")
    off = _HEADER.size

    def take(count, dtype, shape):
        nonlocal off
        nbytes = count * 4
        if off + nbytes > len(data):
            raise BasisFormatError("truncated FMB1 file")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += nbytes
        return arr.astype(np.float64 if dtype == "<f4" else np.int64)

    a_id = take(3 * n, "<f4", (n, 3))
    a_exp = take(3 * n, "<f4", (n, 3))
    s_id = take(N_ID, "<f4", (N_ID,))
    p_id = take(N_ID * 3 * n, "<f4", (N_ID, n, 3))
    s_exp = take(N_EXP, "<f4", (N_EXP,))
    p_exp = take(N_EXP * 3 * n, "<f4", (N_EXP, n, 3))
    a_tex = take(3 * n, "<f4", (n, 3))
    s_tex = take(N_TEX, "<f4", (N_TEX,))
    p_tex = take(N_TEX * 3 * n, "<f4", (N_TEX, n, 3))
    tri = take(3 * t, "<u4", (t, 3))
    lm = take(N_LANDMARKS, "<u4", (N_LANDMARKS,))
    if off != len(data):
        raise BasisFormatError(f"{len(data) - off} trailing bytes after FMB1 payload")
    return MorphableBasis(a_id, a_exp, p_id, s_id, p_exp, s_exp, a_tex, p_tex, s_tex, tri, lm)


def quantize_basis(basis: MorphableBasis) -> MorphableBasis:
    """Round every float array through float32, i.e. what a write/read cycle yields."""
    q = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
    return MorphableBasis(
        q(basis.mean_geometry), q(basis.mean_expression), q(basis.geometry_components),
        q(basis.sigma_id), q(basis.expression_components), q(basis.sigma_exp),
        q(basis.mean_reflectance), q(basis.reflectance_components), q(basis.sigma_tex),
        basis.triangles, basis.landmark_vertex_indices,
    )
