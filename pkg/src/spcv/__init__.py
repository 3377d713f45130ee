"""Structured point cloud video: fit a 2D grid of 3D points to each frame of a
point cloud sequence so that pixels are spatially smooth and temporally consistent."""
from .container import SpcvContainer, read_spcv, write_spcv
from .frame import FrameFitConfig, GeneratorConfig, structurize_frame
from .geom import InvalidInputError, NormalizationTransform
from .metrics import MetricConfig, chamfer, hausdorff
from .sequence import SeqFitConfig, structurize_sequence

__version__ = "0.1.0"

__all__ = [
    "FrameFitConfig", "GeneratorConfig", "InvalidInputError", "MetricConfig", "NormalizationTransform",
    "SeqFitConfig", "SpcvContainer", "chamfer", "hausdorff", "read_spcv", "structurize_frame",
    "structurize_sequence", "write_spcv",
]
