"""Generation-time watermarking for time-series diffusion models.

Seeds are chained across timesteps, shuffled per feature and embedded in the
initial noise through Gaussian quantile strata; detection inverts the sampler
with BDIA and checks the chain.
"""
from .core import InvalidRangeError, NoiseSchedule, TimeWakError, WatermarkKey, build_schedule
from .detect import DetectionReport, detect
from .diffusion import AnalyticGaussianEstimator, bdia_invert, bdia_sample
from .watermark import EmbedParams, SeedMatrix, embed

__version__ = "0.1.0"

__all__ = [
    "AnalyticGaussianEstimator",
    "DetectionReport",
    "EmbedParams",
    "InvalidRangeError",
    "NoiseSchedule",
    "SeedMatrix",
    "TimeWakError",
    "WatermarkKey",
    "bdia_invert",
    "bdia_sample",
    "build_schedule",
    "detect",
    "embed",
]
