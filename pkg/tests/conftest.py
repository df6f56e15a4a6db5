from pathlib import Path

import numpy as np
import pytest

from pointtree.geometry import AffineTransform, PointCloud
from pointtree.rng import make_rng

FIXTURES = Path(__file__).parent / "fixtures"


def random_cloud(n: int, seed: int, box: float = 1.0) -> PointCloud:
    return PointCloud(make_rng(seed).uniform(-box, box, size=(n, 3)))


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_xyz(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    rx = np.array([[1.0, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1.0, 0], [-sy, 0, cy]])
    return rotation_z(az) @ ry @ rx


@pytest.fixture
def cloud64() -> PointCloud:
    return random_cloud(64, seed=7)


@pytest.fixture
def cloud128() -> PointCloud:
    return random_cloud(128, seed=3)
