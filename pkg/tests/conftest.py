"""Shared fixtures for the unit suite."""

import numpy as np
import pytest

from pose6d.geometry import CameraIntrinsics


@pytest.fixture
def cam256() -> CameraIntrinsics:
    """Square template camera used across rendering tests."""
    return CameraIntrinsics(fx=800.0, fy=800.0, cx=128.0, cy=128.0,
                            width=256, height=256)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
