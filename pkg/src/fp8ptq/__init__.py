"""Software FP8 emulation and post-training quantization for linear layers."""

from .calibration import CalibStats, MaxAbsCalibrator, load_stats, save_stats
from .codec import (
    E4M3,
    E4M3_GAUDI2,
    E5M2,
    FORMATS,
    Fp8Format,
    OverflowPolicy,
    RoundingMode,
    decode,
    encode,
    get_format,
    round_trip,
)
from .estimators import FP8Cast, FP8Linear
from .linear import LayerReport, QuantizedLinear, forward, layer_report
from .recipe import ModelManifest, RecipeConfig, RecipeResult, run_calibration, run_recipe
from .scaling import ScaleSet, ScalingConfig, compute_scales
from .tensor import FP8Tensor, matmul_mixed, matmul_reference

__version__ = "0.1.0"

__all__ = [
    "CalibStats",
    "MaxAbsCalibrator",
    "load_stats",
    "save_stats",
    "E4M3",
    "E4M3_GAUDI2",
    "E5M2",
    "FORMATS",
    "Fp8Format",
    "OverflowPolicy",
    "RoundingMode",
    "decode",
    "encode",
    "get_format",
    "round_trip",
    "FP8Cast",
    "FP8Linear",
    "LayerReport",
    "QuantizedLinear",
    "forward",
    "layer_report",
    "ModelManifest",
    "RecipeConfig",
    "RecipeResult",
    "run_calibration",
    "run_recipe",
    "ScaleSet",
    "ScalingConfig",
    "compute_scales",
    "FP8Tensor",
    "matmul_mixed",
    "matmul_reference",
]
