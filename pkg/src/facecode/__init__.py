"""Morphable face code fitting and a recurrent classifier over per-frame codes."""

from .classifier import RnnModel, SequenceSample, TrainConfig, lopo_evaluate, predict, train
from .energy import EnergyBreakdown, EnergyWeights, LandmarkSet, total_energy
from .fitting import (
    FitConfig, export_features, fit_video, gradient_check, identity_consistency_report, independent_frame_fits,
)
from .kernels import active_backend, available_backends, use_backend
from .model import CODE_DIM, CodeVector, MorphableBasis, build_mesh, generate_synthetic_basis, read_basis, write_basis
from .render import Camera, RigidPose, project, render_interpolated, render_pointsplat

__version__ = "0.1.0"

__all__ = [
    "CODE_DIM", "Camera", "CodeVector", "EnergyBreakdown", "EnergyWeights", "FitConfig", "LandmarkSet",
    "MorphableBasis", "RigidPose", "RnnModel", "SequenceSample", "TrainConfig", "active_backend",
    "available_backends", "build_mesh", "export_features", "fit_video", "generate_synthetic_basis",
    "gradient_check", "identity_consistency_report", "independent_frame_fits", "lopo_evaluate", "predict", "project",
    "read_basis", "render_interpolated", "render_pointsplat", "total_energy", "train", "use_backend",
    "write_basis",
]
