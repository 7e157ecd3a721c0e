"""Geometry-aware shape diffusion: deformation kernels, imitation training, sampling and metrics."""

__version__ = "0.1.0"

from .ddk import (DeformationKernel, DiffusionSchedule, Mode, NonFiniteError, Trajectory,
                  average_shape, ddk_step, gdk_step, gdk_trajectory, run_trajectory)
from .ddm import (TrainConfig, equispaced_subsequence, load_checkpoint, sample, save_checkpoint,
                  train)
from .metrics import MetricReport, emd, evaluate, jsd, mmd_cov, one_nna, pairwise_distance_matrix
from .network import Hyperparams, RegressorModel, model_forward, time_embedding, training_loss
from .regularizers import RegularizerWeights, chamfer, total_energy, total_gradient
from .shape import (EdgeConnected, KNearest, Kind, Shape, ShapeError, build_neighborhood,
                    compute_normals, icosphere, laplacian_coordinates)
from .shapeio import load_config, load_shape, load_trajectory, save_shape, save_trajectory

__all__ = [
    "DeformationKernel", "DiffusionSchedule", "Mode", "NonFiniteError", "Trajectory",
    "average_shape", "ddk_step", "gdk_step", "gdk_trajectory", "run_trajectory",
    "TrainConfig", "equispaced_subsequence", "load_checkpoint", "sample", "save_checkpoint", "train",
    "MetricReport", "emd", "evaluate", "jsd", "mmd_cov", "one_nna", "pairwise_distance_matrix",
    "Hyperparams", "RegressorModel", "model_forward", "time_embedding", "training_loss",
    "RegularizerWeights", "chamfer", "total_energy", "total_gradient",
    "EdgeConnected", "KNearest", "Kind", "Shape", "ShapeError", "build_neighborhood",
    "compute_normals", "icosphere", "laplacian_coordinates",
    "load_config", "load_shape", "load_trajectory", "save_shape", "save_trajectory",
]
