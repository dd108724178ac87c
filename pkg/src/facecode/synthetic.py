"""Seeded synthetic videos with ground-truth code vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import LandmarkSet
from .fitting import default_z_translation
from .ingest import FrameObservation
from .model import N_EXP, N_ID, N_SH, N_TEX, CodeVector, MorphableBasis, build_mesh
from .render import Camera, RigidPose, project, render_interpolated, render_pointsplat, transform_points


@dataclass(frozen=True)
class MotionConfig:
    """Initial spread and per-frame random-walk steps of the frame blocks.

    Lighting: band 0 per channel around ``sh_band0``, bands 1 and 2 shared by
    the three channels (white light on a tinted surface).
    """

    identity_std: float = 0.5
    expression_std: float = 0.5
    expression_step: float = 0.1
    rotation_range: float = 0.25
    rotation_step: float = 0.02
    translation_std: tuple = (0.08, 0.08, 0.3)
    translation_step: tuple = (0.005, 0.005, 0.02)
    sh_band0: float = 2.5
    sh_band0_std: float = 0.2
    sh_band1_std: float = 0.25
    sh_band2_std: float = 0.1
    sh_step: float = 0.02
    pixel_noise: float = 0.0
    background: float = 0.0
    # "interpolated" gives photometrically exact vertex samples, "pointsplat" the raw z-buffer splat
    renderer: str = "interpolated"
    margin: int = 8

    def __post_init__(self):
        if self.renderer not in ("interpolated", "pointsplat"):
            raise ValueError(f"unknown renderer {self.renderer!r}")


@dataclass
class SyntheticVideo:
    frames: list
    codes: list
    coverage: list = field(default_factory=list)

    @property
    def features(self) -> np.ndarray:
        return np.stack([c.to_array() for c in self.codes])


def _initial_gamma(rng, cfg: MotionConfig) -> np.ndarray:
    light = np.concatenate([rng.normal(0, cfg.sh_band1_std, 3), rng.normal(0, cfg.sh_band2_std, 5)])
    gamma = np.zeros(N_SH)
    for ch in range(3):
        gamma[ch * 9] = cfg.sh_band0 + rng.normal(0, cfg.sh_band0_std)
        gamma[ch * 9 + 1:ch * 9 + 9] = light
    return gamma


def render_frame(basis: MorphableBasis, camera: Camera, code: CodeVector, cfg: MotionConfig | None = None,
                 rng=None, frame_index: int = 0):
    """Image plus exact landmark projections for one code vector."""
    cfg = cfg or MotionConfig()
    mesh = build_mesh(basis, code)
    pose = RigidPose(code.omega, code.t)
    if cfg.renderer == "interpolated":
        img, cov = render_interpolated(mesh, pose, camera, code.gamma, background=cfg.background, margin=cfg.margin)
    else:
        img, cov = render_pointsplat(mesh, pose, camera, code.gamma, background=cfg.background)
    if cfg.pixel_noise > 0:
        if rng is None:
            raise ValueError("pixel noise needs an rng")
        img = img + rng.normal(0.0, cfg.pixel_noise, img.shape)
    uv = project(transform_points(mesh.positions, pose), camera).uv[basis.landmark_vertex_indices]
    rect = (0.0, 0.0, float(camera.width), float(camera.height))
    return FrameObservation(img, LandmarkSet(uv, None), rect, frame_index), cov


def generate_synthetic_video(basis: MorphableBasis, camera: Camera, seed: int, n_frames: int,
                             motion: MotionConfig | None = None) -> SyntheticVideo:
    """One random identity, smooth random walks on expression, pose and lighting."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    cfg = motion or MotionConfig()
    rng = np.random.default_rng(seed)
    z0 = default_z_translation(basis, camera)
    alpha = rng.normal(0, cfg.identity_std, N_ID)
    beta = rng.normal(0, cfg.identity_std, N_TEX)
    delta = rng.normal(0, cfg.expression_std, N_EXP)
    omega = rng.uniform(-cfg.rotation_range, cfg.rotation_range, 3)
    t = np.array([0.0, 0.0, z0]) + rng.normal(0, 1, 3) * cfg.translation_std
    gamma = _initial_gamma(rng, cfg)
    frames, codes, cov = [], [], []
    for f in range(n_frames):
        if f:
            delta = delta + rng.normal(0, cfg.expression_step, N_EXP)
            omega = omega + rng.normal(0, cfg.rotation_step, 3)
            t = t + rng.normal(0, 1, 3) * cfg.translation_step
            gamma = gamma + rng.normal(0, cfg.sh_step, N_SH)
        code = CodeVector(alpha, beta, delta, gamma, omega, t)
        frame, c = render_frame(basis, camera, code, cfg, rng, f)
        frames.append(frame)
        codes.append(code)
        cov.append(c)
    return SyntheticVideo(frames, codes, cov)


def gradcheck_case(basis: MorphableBasis, camera: Camera, rng):
    """A random smooth configuration: a noisy render of one code and a second,
    unrelated code at which the gradient is probed."""

    def code():
        z0 = default_z_translation(basis, camera)
        c = CodeVector(rng.normal(0, .5, N_ID), rng.normal(0, .5, N_TEX), rng.normal(0, .5, N_EXP))
        c.gamma[:] = rng.normal(0, .3, N_SH)
        c.gamma[[0, 9, 18]] += 3.0
        c.omega[:] = rng.normal(0, .2, 3)
        c.t[:] = [rng.normal(0, .05), rng.normal(0, .05), z0 + rng.normal(0, .2)]
        return c

    frame, _ = render_frame(basis, camera, code(), MotionConfig(pixel_noise=0.02, margin=0), rng)
    frame.landmarks.points += rng.normal(0, 1.0, frame.landmarks.points.shape)
    return code(), frame
