#!/usr/bin/env python3
"""
测试公共夹具
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from discretization import build_phase_grid  # noqa: E402
from geometry import Ball, Box  # noqa: E402


@pytest.fixture(scope="session")
def ball_grid():
    """单位球上的小网格"""
    return build_phase_grid(Ball(), nx=8, n_polar=2, n_azimuth=4, n_energy=2)


@pytest.fixture(scope="session")
def box_grid():
    """单位立方体上的小网格"""
    return build_phase_grid(Box(), nx=6, n_polar=2, n_azimuth=4, n_energy=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
