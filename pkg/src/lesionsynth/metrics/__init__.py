"""Generation-quality, classification and segmentation metrics."""

from .classification import ConfusionMatrix, classification_report, confusion_matrix
from .generation import (
    FeatureStats,
    InsufficientSamplesError,
    PerceptualExtractor,
    RandomConvExtractor,
    ScaleError,
    compute_feature_stats,
    flatten_extractor,
    frechet_distance,
    identity_perceptual,
    lpips,
    ms_ssim,
    random_conv_perceptual,
    set_lpips,
    set_ms_ssim,
)
from .kernels import BACKEND, available_backends
from .report import MetricReport, ReportError, read_report, render_markdown, validate_report, write_report
from .segmentation import MaskPair, UndefinedMetricError, asd, boundary_pixels, dice_iou, hausdorff, segmentation_scores

__all__ = [
    "BACKEND",
    "ConfusionMatrix",
    "FeatureStats",
    "InsufficientSamplesError",
    "MaskPair",
    "MetricReport",
    "PerceptualExtractor",
    "RandomConvExtractor",
    "ReportError",
    "ScaleError",
    "UndefinedMetricError",
    "asd",
    "available_backends",
    "boundary_pixels",
    "classification_report",
    "compute_feature_stats",
    "confusion_matrix",
    "dice_iou",
    "flatten_extractor",
    "frechet_distance",
    "hausdorff",
    "identity_perceptual",
    "lpips",
    "ms_ssim",
    "random_conv_perceptual",
    "read_report",
    "render_markdown",
    "segmentation_scores",
    "set_lpips",
    "set_ms_ssim",
    "validate_report",
    "write_report",
]
