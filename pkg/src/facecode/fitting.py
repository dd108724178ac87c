"""Analysis-by-synthesis fitting of code vectors to video frames.

Identity (alpha, beta) is a single block shared by every frame of a video;
expression, illumination and pose are per frame. Gradients are analytic.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .energy import (
    DegenerateInputError,
    DiscreteState,
    EnergyWeights,
    FrameEvaluation,
    evaluate_frame,
)
from .model import (
    BLOCKS,
    CODE_DIM,
    N_EXP,
    N_ID,
    N_SH,
    N_TEX,
    CodeVector,
    MorphableBasis,
    normals_vjp,
)
from .render import Camera, canonicalize_axis_angle, projection_jacobian, rotation_from_axis_angle, rotation_jacobian, sh_basis_gradient

logger = logging.getLogger(__name__)

# below this residual norm the L2,1 term is treated as quadratic for the gradient
RESIDUAL_EPS = 1e-8
IDENTITY_DIM = N_ID + N_TEX
FRAME_DIM = N_EXP + N_SH + 3 + 3

# Adam moves every coordinate by about the same amount per step. The linear
# coefficient blocks have to travel O(1) from zero, the pose only a few
# hundredths after the landmark pre-fit, so the former get a larger step.
DEFAULT_STEP_SCALES = {"alpha": 5.0, "beta": 5.0, "delta": 5.0, "gamma": 5.0, "omega": 1.0, "t": 1.0}


class NumericalFailure(ArithmeticError):
    pass


class FitFailure(RuntimeError):
    pass


def _backward(ev: FrameEvaluation, basis: MorphableBasis, camera: Camera, weights: EnergyWeights) -> np.ndarray:
    code = ev.code
    used = ev.discrete.used
    n_used = ev.breakdown.visible_count

    # photometric: d/dc of mean ||c - I(uv)||
    r = ev.residuals[used]
    norm = np.sqrt(np.einsum("ij,ij->i", r, r))
    g_col = np.zeros_like(ev.colors)
    g_col[used] = (weights.w_vert / n_used) * r / np.maximum(norm, RESIDUAL_EPS)[:, None]

    # the image sample enters with a minus sign
    g_u = np.zeros(len(g_col))
    g_v = np.zeros(len(g_col))
    g_u[used] = -np.einsum("ij,ij->i", g_col[used], ev.sample_du[used])
    g_v[used] = -np.einsum("ij,ij->i", g_col[used], ev.sample_dv[used])

    lms = ev.breakdown.valid_landmarks
    if lms > 0:
        lm_set = ev.landmarks
        idx = basis.landmark_vertex_indices[lm_set.validity]
        diff = ev.projected.uv[idx] - lm_set.points[lm_set.validity]
        scale = weights.w_land * 2.0 / lms
        np.add.at(g_u, idx, scale * diff[:, 0])
        np.add.at(g_v, idx, scale * diff[:, 1])

    du, dv = projection_jacobian(ev.camera_points, camera)
    g_cam = g_u[:, None] * du + g_v[:, None] * dv
    g_t = g_cam.sum(axis=0)
    rot = ev.rotation
    g_rot = g_cam.T @ ev.positions
    g_pos = g_cam @ rot

    # shading: c = B * (H(R n) G^T)
    gam = code.gamma.reshape(3, 9)
    g_refl = g_col * ev.shading
    g_shading = g_col * ev.reflectance
    g_gamma = (g_shading.T @ ev.sh).reshape(-1)
    g_sh = g_shading @ gam
    g_nrot = np.einsum("nj,njk->nk", g_sh, sh_basis_gradient(ev.rotated_normals))
    g_rot += g_nrot.T @ ev.normals
    g_n = g_nrot @ rot
    g_pos += normals_vjp(ev.positions, basis.triangles, ev.normals, ev.degenerate, ev.normal_length, g_n)

    g_omega = np.einsum("ij,kij->k", g_rot, rotation_jacobian(code.omega))
    flat_pos = g_pos.reshape(-1)
    grad = np.empty(CODE_DIM)
    grad[BLOCKS["alpha"]] = basis.id_flat @ flat_pos + 2.0 * weights.w_alpha * code.alpha
    grad[BLOCKS["beta"]] = basis.tex_flat @ g_refl.reshape(-1) + 2.0 * weights.w_beta * code.beta
    grad[BLOCKS["delta"]] = basis.exp_flat @ flat_pos + 2.0 * weights.w_delta * code.delta
    grad[BLOCKS["gamma"]] = g_gamma
    grad[BLOCKS["omega"]] = g_omega
    grad[BLOCKS["t"]] = g_t
    return grad


def energy_gradient(code: CodeVector, basis: MorphableBasis, camera: Camera, frame, weights: EnergyWeights | None = None,
                    discrete: DiscreteState | None = None):
    """Analytic gradient of the frame energy w.r.t. all 257 code entries.

    The photometric vertex set and bilinear cells are held fixed (they are
    piecewise constant in the parameters). Returns ``(gradient, breakdown)``.
    """
    weights = weights or EnergyWeights()
    ev = evaluate_frame(code, basis, camera, frame, weights, discrete)
    grad = _backward(ev, basis, camera, weights)
    if not np.all(np.isfinite(grad)):
        bad = [k for k, s in BLOCKS.items() if not np.all(np.isfinite(grad[s]))]
        raise NumericalFailure(f"non-finite gradient in block(s): {', '.join(bad)}")
    return grad, ev.breakdown


@dataclass
class GradientCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    relative_error: np.ndarray

    @property
    def max_relative_error(self) -> float:
        return float(self.relative_error.max())

    def block_errors(self) -> dict:
        return {k: float(self.relative_error[s].max()) for k, s in BLOCKS.items()}


def gradient_check(code: CodeVector, basis: MorphableBasis, camera: Camera, frame,
                   weights: EnergyWeights | None = None, step: float = 1e-4, floor: float = 1e-10) -> GradientCheck:
    """Compare the analytic gradient with central differences, one coordinate at a time.

    The discrete state (photometric vertex set, bilinear cells) of the base
    point is frozen for every probe, so the check measures the smooth branch
    the analytic gradient describes. Uses the five-point stencil, whose
    O(h^4) truncation stays well below 1e-4 even where a vertex samples a
    steep image edge; the plain two-point difference does not.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    weights = weights or EnergyWeights()
    ev = evaluate_frame(code, basis, camera, frame, weights)
    analytic = _backward(ev, basis, camera, weights)
    x = code.to_array()

    def energy(v):
        return evaluate_frame(CodeVector.from_array(v), basis, camera, frame, weights, ev.discrete).breakdown.total

    numeric = np.empty(CODE_DIM)
    for j in range(CODE_DIM):
        f = {}
        for k in (-2, -1, 1, 2):
            v = x.copy()
            v[j] += k * step
            f[k] = energy(v)
        numeric[j] = (f[-2] - 8.0 * f[-1] + 8.0 * f[1] - f[2]) / (12.0 * step)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradientCheck(analytic, numeric, rel)


# --------------------------------------------------------------------------
# optimizer state


@dataclass
class FitConfig:
    max_iterations: int = 500
    learning_rate: float = 0.01
    identity_frame_count: int = 3
    init_z_translation: float | None = None
    init_sh_offset: float = 2.0
    convergence_tol: float = 1e-6
    convergence_window: int = 10
    prefit_iterations: int = 100
    seed: int = 0
    workers: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # per-block multipliers on learning_rate
    step_scales: dict = field(default_factory=lambda: dict(DEFAULT_STEP_SCALES))
    # learning rate shrinks on a cosine to this fraction by the last iteration
    final_lr_fraction: float = 0.01

    def __post_init__(self):
        if self.max_iterations < 0 or self.prefit_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.identity_frame_count < 1:
            raise ValueError("identity_frame_count must be >= 1")
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise ValueError("final_lr_fraction must be in (0, 1]")
        unknown = set(self.step_scales) - set(DEFAULT_STEP_SCALES)
        if unknown:
            raise ValueError(f"unknown step scale blocks {sorted(unknown)}")


@dataclass
class FrameParams:
    delta: np.ndarray
    gamma: np.ndarray
    omega: np.ndarray
    t: np.ndarray


@dataclass
class VideoFitState:
    """Shared identity plus per-frame parameters, with Adam moments over the flat vector.

    Flat layout: ``[alpha | beta | (delta, gamma, omega, t) per frame]``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    per_frame: list
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        n = self.size
        if self.adam_m is None:
            self.adam_m = np.zeros(n)
        if self.adam_v is None:
            self.adam_v = np.zeros(n)
        if self.adam_m.shape != (n,) or self.adam_v.shape != (n,):
            raise ValueError("Adam moment shapes do not match the parameters")

    @classmethod
    def initial(cls, n_frames: int, z_translation: float, sh_offset: float):
        frames = []
        for _ in range(n_frames):
            gamma = np.zeros(N_SH)
            gamma[[0, 9, 18]] = sh_offset
            frames.append(FrameParams(np.zeros(N_EXP), gamma, np.zeros(3), np.array([0.0, 0.0, z_translation])))
        return cls(np.zeros(N_ID), np.zeros(N_TEX), frames)

    @property
    def n_frames(self) -> int:
        return len(self.per_frame)

    @property
    def size(self) -> int:
        return IDENTITY_DIM + FRAME_DIM * self.n_frames

    def flat(self) -> np.ndarray:
        parts = [self.alpha, self.beta]
        for p in self.per_frame:
            parts += [p.delta, p.gamma, p.omega, p.t]
        return np.concatenate(parts)

    def set_flat(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        self.alpha = x[:N_ID].copy()
        self.beta = x[N_ID:IDENTITY_DIM].copy()
        for f, p in enumerate(self.per_frame):
            o = IDENTITY_DIM + f * FRAME_DIM
            p.delta = x[o:o + N_EXP].copy()
            p.gamma = x[o + N_EXP:o + N_EXP + N_SH].copy()
            p.omega = x[o + N_EXP + N_SH:o + N_EXP + N_SH + 3].copy()
            p.t = x[o + N_EXP + N_SH + 3:o + FRAME_DIM].copy()

    def assemble(self, frame: int) -> CodeVector:
        p = self.per_frame[frame]
        return CodeVector(self.alpha, self.beta, p.delta, p.gamma, p.omega, p.t)

    def copy(self) -> "VideoFitState":
        s = VideoFitState(
            self.alpha.copy(), self.beta.copy(),
            [FrameParams(p.delta.copy(), p.gamma.copy(), p.omega.copy(), p.t.copy()) for p in self.per_frame],
            self.adam_m.copy(), self.adam_v.copy(), self.step_count,
        )
        return s


def _flat_gradient(state: VideoFitState, gradients, identity_frames) -> np.ndarray:
    if len(gradients) != state.n_frames:
        raise ValueError("need one gradient per frame")
    g = np.zeros(state.size)
    ident = [gradients[f][:IDENTITY_DIM] for f in identity_frames if gradients[f] is not None]
    if ident:
        g[:IDENTITY_DIM] = np.mean(ident, axis=0)
    for f, gf in enumerate(gradients):
        if gf is None:
            continue
        o = IDENTITY_DIM + f * FRAME_DIM
        g[o:o + FRAME_DIM] = gf[IDENTITY_DIM:]
    return g


def _step_scale_vector(n_frames: int, scales) -> np.ndarray:
    s = dict(DEFAULT_STEP_SCALES)
    s.update(scales or {})
    frame = np.concatenate([np.full(N_EXP, s["delta"]), np.full(N_SH, s["gamma"]), np.full(3, s["omega"]), np.full(3, s["t"])])
    return np.concatenate([np.full(N_ID, s["alpha"]), np.full(N_TEX, s["beta"]), np.tile(frame, n_frames)])


def adam_step(state: VideoFitState, gradients, config: FitConfig, identity_frames=None,
              lr_factor: float = 1.0) -> VideoFitState:
    """One Adam update in place (and returned).

    ``gradients`` holds a 257-vector per frame (``None`` for a frame that could
    not be evaluated). The identity gradient is the mean over
    ``identity_frames`` (all frames by default).
    """
    if identity_frames is None:
        identity_frames = range(state.n_frames)
    g = _flat_gradient(state, gradients, list(identity_frames))
    b1, b2 = config.beta1, config.beta2
    state.step_count += 1
    state.adam_m *= b1
    state.adam_m += (1.0 - b1) * g
    state.adam_v *= b2
    state.adam_v += (1.0 - b2) * (g * g)
    m_hat = state.adam_m / (1.0 - b1**state.step_count)
    v_hat = state.adam_v / (1.0 - b2**state.step_count)
    lr = config.learning_rate * _step_scale_vector(state.n_frames, config.step_scales) * lr_factor
    x = state.flat() - lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    state.set_flat(x)
    for p in state.per_frame:
        p.omega = canonicalize_axis_angle(p.omega)
    return state


# --------------------------------------------------------------------------
# fitting


def default_z_translation(basis: MorphableBasis, camera: Camera, coverage: float = 0.6) -> float:
    """Depth placing the mean face so it spans ``coverage`` of the image height."""
    mean = basis.mean_geometry + basis.mean_expression
    extent = float(mean[:, 1].max() - mean[:, 1].min())
    return -(camera.focal_length * extent / (coverage * camera.height)) + float(mean[:, 2].max())


def _landmark_pose_gradient(points, omega, t, camera, landmarks, weights):
    """Landmark-term gradient w.r.t. (omega, t) for fixed model-space landmark points."""
    rot = rotation_from_axis_angle(omega)
    cam = points @ rot.T + t
    depth = -cam[:, 2]
    cx, cy = camera.principal_point
    uv = np.stack([cx + camera.focal_length * cam[:, 0] / depth, cy - camera.focal_length * cam[:, 1] / depth], axis=1)
    ok = landmarks.validity
    diff = np.where(ok[:, None], uv - landmarks.points, 0.0)
    n = ok.sum()
    e = float(np.sum(diff * diff) / n)
    g_uv = weights.w_land * 2.0 * diff / n
    du, dv = projection_jacobian(cam, camera)
    g_cam = g_uv[:, :1] * du + g_uv[:, 1:] * dv
    g_rot = g_cam.T @ points
    g_omega = np.einsum("ij,kij->k", g_rot, rotation_jacobian(omega))
    return weights.w_land * e, np.concatenate([g_omega, g_cam.sum(axis=0)])


def _prefit_pose(state: VideoFitState, frames, basis, camera, config, weights):
    lm_points = (basis.mean_geometry + basis.mean_expression)[basis.landmark_vertex_indices]
    for f, frame in enumerate(frames):
        if frame.landmarks.n_valid == 0:
            continue
        p = state.per_frame[f]
        x = np.concatenate([p.omega, p.t])
        m = np.zeros(6)
        v = np.zeros(6)
        for k in range(1, config.prefit_iterations + 1):
            _, g = _landmark_pose_gradient(lm_points, x[:3], x[3:], camera, frame.landmarks, weights)
            m = config.beta1 * m + (1 - config.beta1) * g
            v = config.beta2 * v + (1 - config.beta2) * g * g
            x = x - config.learning_rate * (m / (1 - config.beta1**k)) / (np.sqrt(v / (1 - config.beta2**k)) + config.epsilon)
            x[:3] = canonicalize_axis_angle(x[:3])
        p.omega, p.t = x[:3].copy(), x[3:].copy()


@dataclass
class FitResult:
    state: VideoFitState
    history: list = field(default_factory=list)
    best_energy: float = np.inf
    best_iteration: int = -1
    converged: bool = False
    iterations: int = 0

    @property
    def warning(self) -> bool:
        """Set when the fit stopped on the iteration cap rather than the tolerance."""
        return not self.converged


def _evaluate_all(state, frames, basis, camera, weights, pool):
    def one(f):
        try:
            return energy_gradient(state.assemble(f), basis, camera, frames[f], weights)
        except DegenerateInputError:
            return None, None

    if pool is None:
        return [one(f) for f in range(len(frames))]
    return list(pool.map(one, range(len(frames))))


def fit_video(frames, basis: MorphableBasis, camera: Camera, config: FitConfig | None = None,
              weights: EnergyWeights | None = None) -> FitResult:
    """Jointly fit all frames of one video with a shared identity block.

    Returns the lowest-energy state visited. ``history`` holds one list of
    per-frame :class:`EnergyBreakdown` (``None`` for degenerate frames) per
    iteration.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("fit_video needs at least one frame")
    config = config or FitConfig()
    weights = weights or EnergyWeights()
    if not any(f.landmarks.n_valid for f in frames):
        raise FitFailure("no frame has valid landmarks")
    z0 = config.init_z_translation
    if z0 is None:
        z0 = default_z_translation(basis, camera)
    state = VideoFitState.initial(len(frames), z0, config.init_sh_offset)
    _prefit_pose(state, frames, basis, camera, config, weights)

    rng = np.random.default_rng(config.seed)
    n_ident = min(config.identity_frame_count, len(frames))
    result = FitResult(state.copy())
    totals = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for it in range(config.max_iterations + 1):
            evals = _evaluate_all(state, frames, basis, camera, weights, pool)
            grads = [g for g, _ in evals]
            breakdowns = [b for _, b in evals]
            if all(b is None for b in breakdowns):
                if it == 0:
                    raise FitFailure("every frame is degenerate at initialization")
                logger.warning("all frames degenerate at iteration %d; stopping", it)
                break
            result.history.append(breakdowns)
            total = sum(b.total if b is not None else np.inf for b in breakdowns)
            totals.append(total)
            if total < result.best_energy:
                result.best_energy = total
                result.best_iteration = it
                result.state = state.copy()
            w = config.convergence_window
            if len(totals) > w and np.isfinite(totals[-1 - w]):
                prev = totals[-1 - w]
                if abs(prev - total) <= config.convergence_tol * max(abs(prev), 1e-300):
                    result.converged = True
                    break
            if it == config.max_iterations:
                break
            ident = sorted(rng.choice(len(frames), size=n_ident, replace=False).tolist())
            ident = [f for f in ident if grads[f] is not None] or [f for f in range(len(frames)) if grads[f] is not None]
            frac = it / max(config.max_iterations, 1)
            lr_factor = config.final_lr_fraction + (1.0 - config.final_lr_fraction) * 0.5 * (1.0 + np.cos(np.pi * frac))
            adam_step(state, grads, config, ident, lr_factor)
    finally:
        if pool is not None:
            pool.shutdown()
    result.iterations = len(totals)
    if not result.converged:
        logger.info("fit stopped after %d evaluations without meeting tolerance", len(totals))
    return result


def export_features(state: VideoFitState) -> np.ndarray:
    """One 257-vector per frame: ``[alpha | beta | delta_f | gamma_f | omega_f | t_f]``."""
    return np.stack([state.assemble(f).to_array() for f in range(state.n_frames)])


@dataclass
class IdentityReport:
    alpha_std: np.ndarray
    beta_std: np.ndarray

    @property
    def mean_alpha_std(self) -> float:
        return float(self.alpha_std.mean())

    @property
    def mean_beta_std(self) -> float:
        return float(self.beta_std.mean())

    @property
    def mean_std(self) -> float:
        return float(np.concatenate([self.alpha_std, self.beta_std]).mean())

    def as_dict(self):
        return {
            "mean_alpha_std": self.mean_alpha_std,
            "mean_beta_std": self.mean_beta_std,
            "mean_std": self.mean_std,
            "alpha_std": self.alpha_std.tolist(),
            "beta_std": self.beta_std.tolist(),
        }


def identity_consistency_report(fits) -> IdentityReport:
    """Per-coefficient sample standard deviation of alpha and beta across fits."""
    fits = list(fits)
    if len(fits) < 2:
        raise ValueError("identity consistency needs at least two fits")
    # shifting by the first fit makes identical fits give an exact zero; the
    # plain mean of equal floats can round away from the value itself
    a = np.stack([f.alpha for f in fits])
    b = np.stack([f.beta for f in fits])
    return IdentityReport((a - a[0]).std(axis=0, ddof=1), (b - b[0]).std(axis=0, ddof=1))


def independent_frame_fits(frames, basis: MorphableBasis, camera: Camera, config: FitConfig | None = None,
                           weights: EnergyWeights | None = None) -> list:
    """Fit every frame on its own (no shared identity); one CodeVector per frame."""
    out = []
    for f in frames:
        res = fit_video([f], basis, camera, config, weights)
        out.append(res.state.assemble(0))
    return out
