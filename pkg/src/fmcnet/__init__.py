"""Numerical engine for a wavelet-based volumetric segmentation network.

Building blocks: exactly invertible Haar down/upsampling, dual-path
high-frequency attention, a multi-granularity selective-scan block, a
deep-supervised training loop over synthetic phantoms, and DSC/HD95
evaluation. Hot kernels run under numba with a pure-numpy fallback
(FMC_BACKEND selects; FMC_THREADS caps intra-op parallelism).
"""

from .autodiff import NonFiniteError, ShapeError, Tape, Tensor, backward, grad_check
from .backend import BACKEND, THREADS
from .net import (
    BaselineNet,
    FmcNet,
    NetworkConfig,
    TrainSettings,
    TrainingDiverged,
    class_weights_from_labels,
    segmentation_loss,
    train_network,
)
from .phantom import PhantomConfig, PhantomSample, generate, read_volume, write_volume
from .ssm import MgSsmConfig, ScanParams, selective_scan, selective_scan_blocked
from .wavelet import WaveletSubbands, dwt3, idwt3, wtu

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "THREADS",
    "BaselineNet",
    "FmcNet",
    "MgSsmConfig",
    "NetworkConfig",
    "NonFiniteError",
    "PhantomConfig",
    "PhantomSample",
    "ScanParams",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainSettings",
    "TrainingDiverged",
    "WaveletSubbands",
    "backward",
    "class_weights_from_labels",
    "dwt3",
    "generate",
    "grad_check",
    "idwt3",
    "read_volume",
    "segmentation_loss",
    "selective_scan",
    "selective_scan_blocked",
    "train_network",
    "write_volume",
    "wtu",
]
