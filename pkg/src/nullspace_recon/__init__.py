"""Learned reconstruction for linear inverse problems with null-space correctors.

Forward operators (masked Fourier, limited-angle Radon, dense matrices), a
small U-net, data-consistent reconstruction pipelines with optional per-pixel
uncertainty, synthetic phantom data and evaluation metrics.
"""

from .config import ExperimentConfig, load_config
from .data import PerturbationSpec, PhantomSpec, generate_phantom, read_dataset, write_dataset
from .exceptions import (CorruptionError, DimensionError, DivergenceError, ManifestError,
                         StateError, StatisticsError, TrainingFault)
from .objectives import image_metrics, mae_risk, psnr, ssim, uncertainty_loss
from .operators import (DenseMatrixOp, LandweberConfig, LimitedAngleRadonOp, MaskedFourierOp,
                        landweber_project)
from .recon import METHODS, ReconMethod, data_consistency_gap

__version__ = "0.1.0"

__all__ = [
    "METHODS", "CorruptionError", "DenseMatrixOp", "DimensionError", "DivergenceError",
    "ExperimentConfig", "LandweberConfig", "LimitedAngleRadonOp", "ManifestError",
    "MaskedFourierOp", "PerturbationSpec", "PhantomSpec", "ReconMethod", "StateError",
    "StatisticsError", "TrainingFault", "data_consistency_gap", "generate_phantom",
    "image_metrics", "landweber_project", "load_config", "mae_risk", "psnr", "read_dataset",
    "ssim", "uncertainty_loss", "write_dataset",
]
