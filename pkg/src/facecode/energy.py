"""Fitting objective: landmark, vertex-wise photometric and Tikhonov terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import N_LANDMARKS, CodeVector, MorphableBasis, _normals_with_cache, evaluate_geometry, evaluate_reflectance
from .render import Camera, ProjectedVertices, project, rotation_from_axis_angle, sh_basis


class DegenerateInputError(ValueError):
    """A loss term has nothing to average over (no visible vertex, no valid landmark)."""


@dataclass(frozen=True)
class EnergyWeights:
    w_land: float = 0.0019
    w_vert: float = 1.92
    w_alpha: float = 2.9e-5
    w_beta: float = 4.93e-8
    w_delta: float = 2.32e-5

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative")


@dataclass
class LandmarkSet:
    points: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.validity is None:
            self.validity = np.ones(self.points.shape[0], dtype=bool)
        self.validity = np.asarray(self.validity, dtype=bool).reshape(-1)
        if self.validity.shape[0] != self.points.shape[0]:
            raise ValueError("validity flags must match landmark count")

    @property
    def n_valid(self) -> int:
        return int(self.validity.sum())


@dataclass
class EnergyBreakdown:
    e_land: float
    e_vert: float
    e_reg: float
    total: float
    visible_count: int
    valid_landmarks: int


@dataclass
class DiscreteState:
    """Piecewise-constant choices of one evaluation: the photometric vertex set
    and the bilinear cell of every vertex. Passing it back in evaluates the
    smooth branch of the energy that contains that configuration."""

    used: np.ndarray
    cells: np.ndarray


def landmark_loss(projected: ProjectedVertices, landmark_indices, landmarks: LandmarkSet) -> float:
    """Mean squared pixel distance over the valid landmarks."""
    idx = np.asarray(landmark_indices, dtype=np.int64)
    if idx.shape[0] != landmarks.points.shape[0]:
        raise ValueError("landmark index count does not match annotations")
    ok = landmarks.validity
    if not ok.any():
        raise DegenerateInputError("no valid landmarks")
    diff = projected.uv[idx[ok]] - landmarks.points[ok]
    return float(np.sum(diff * diff) / ok.sum())


def photometric_loss(shaded, projected: ProjectedVertices, visible, image):
    """L2,1 photometric loss over visible vertices with a valid bilinear cell.

    Returns ``(loss, residuals)``; residuals are ``shaded - sample`` per vertex
    and zero for vertices that do not contribute.
    """
    samples, _, _, _, valid = kernels.bilinear_gather(image, projected.uv)
    used = np.asarray(visible, dtype=bool) & valid
    if not used.any():
        raise DegenerateInputError("no visible vertex with a valid image neighborhood")
    residuals = np.zeros_like(samples)
    residuals[used] = np.asarray(shaded)[used] - samples[used]
    loss = float(np.sum(np.sqrt(np.einsum("ij,ij->i", residuals[used], residuals[used]))) / used.sum())
    return loss, residuals


def regularization(alpha, beta, delta, weights: EnergyWeights) -> float:
    a, b, d = (np.asarray(v, dtype=np.float64) for v in (alpha, beta, delta))
    return float(weights.w_alpha * (a @ a) + weights.w_beta * (b @ b) + weights.w_delta * (d @ d))


@dataclass
class FrameEvaluation:
    """Forward pass of one frame with the intermediates the gradient needs."""

    breakdown: EnergyBreakdown
    code: CodeVector
    positions: np.ndarray
    reflectance: np.ndarray
    normals: np.ndarray
    degenerate: np.ndarray
    normal_length: np.ndarray
    rotation: np.ndarray
    camera_points: np.ndarray
    projected: ProjectedVertices
    rotated_normals: np.ndarray
    sh: np.ndarray
    shading: np.ndarray
    colors: np.ndarray
    residuals: np.ndarray
    sample_du: np.ndarray
    sample_dv: np.ndarray
    discrete: DiscreteState
    landmarks: LandmarkSet


def evaluate_frame(code: CodeVector, basis: MorphableBasis, camera: Camera, frame, weights: EnergyWeights,
                   discrete: DiscreteState | None = None) -> FrameEvaluation:
    """Run the full forward model on one frame and combine the loss terms.

    ``frame`` needs ``image`` (H, W, 3) and ``landmarks`` (:class:`LandmarkSet`).
    """
    positions = evaluate_geometry(basis, code.alpha, code.delta)
    reflectance = evaluate_reflectance(basis, code.beta)
    normals, degenerate, _, length = _normals_with_cache(positions, basis.triangles)
    rot = rotation_from_axis_angle(code.omega)
    cam = positions @ rot.T + code.t
    proj = project(cam, camera)
    nrot = normals @ rot.T
    sh = sh_basis(nrot)
    shading = sh @ code.gamma.reshape(3, 9).T
    colors = reflectance * shading

    if discrete is None:
        samples, du, dv, cells, valid = kernels.bilinear_gather(frame.image, proj.uv)
        used = proj.in_frustum & (nrot[:, 2] > 0.0) & valid
        discrete = DiscreteState(used, cells)
    else:
        samples, du, dv, _, _ = kernels.bilinear_gather(frame.image, proj.uv, discrete.cells)
        used = discrete.used
    n_used = int(used.sum())
    if n_used == 0:
        raise DegenerateInputError("no visible vertex with a valid image neighborhood")
    residuals = np.zeros_like(colors)
    residuals[used] = colors[used] - samples[used]
    e_vert = float(np.sum(np.sqrt(np.einsum("ij,ij->i", residuals[used], residuals[used]))) / n_used)

    lms = frame.landmarks
    if lms.points.shape[0] != N_LANDMARKS:
        raise ValueError(f"expected {N_LANDMARKS} landmarks, got {lms.points.shape[0]}")
    e_land = landmark_loss(proj, basis.landmark_vertex_indices, lms)
    e_reg = regularization(code.alpha, code.beta, code.delta, weights)
    total = weights.w_land * e_land + weights.w_vert * e_vert + e_reg
    breakdown = EnergyBreakdown(e_land, e_vert, e_reg, total, n_used, lms.n_valid)
    return FrameEvaluation(
        breakdown, code, positions, reflectance, normals, degenerate, length, rot, cam, proj,
        nrot, sh, shading, colors, residuals, du, dv, discrete, lms,
    )


def total_energy(code: CodeVector, basis: MorphableBasis, camera: Camera, frame,
                 weights: EnergyWeights | None = None) -> EnergyBreakdown:
    return evaluate_frame(code, basis, camera, frame, weights or EnergyWeights()).breakdown
