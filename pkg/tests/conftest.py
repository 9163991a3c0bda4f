import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from timewak.core import WatermarkKey, build_schedule  # noqa: E402
from timewak.diffusion import AnalyticGaussianEstimator  # noqa: E402
from timewak.io import ar1_dataset, window  # noqa: E402
from timewak.watermark import EmbedParams  # noqa: E402


@dataclass
class DeskSetup:
    key: WatermarkKey
    params: EmbedParams
    schedule: object
    estimator: AnalyticGaussianEstimator
    windows: np.ndarray


def make_desk_setup(key=None, T=100, W=24, F=6):
    """Min-max normalised AR(1) data, W=24, F=6, linear betas scaled for T steps."""
    key = key or WatermarkKey.from_seed(7)
    sched = build_schedule(T, "linear", 0.1 / T, min(20.0 / T, 0.5), gamma=1.0)
    windows = window(ar1_dataset(4000, F).normalized("minmax"), W, stride=1)
    est = AnalyticGaussianEstimator.fit(windows, sched)
    return DeskSetup(key, EmbedParams(key, W, F, 2, 2), sched, est, windows)


@pytest.fixture(scope="session")
def desk():
    return make_desk_setup()


@pytest.fixture
def key():
    return WatermarkKey.from_seed("unit-tests")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
