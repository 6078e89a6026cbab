import numpy as np
import pytest
from hypothesis import settings

from defslam.geometry import lift
from defslam.types import CameraIntrinsics, DepthFrame

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def plane_frame(z=100.0, intr=None, tilt_deg=0.0, noise=0.0, seed=0, index=0) -> DepthFrame:
    """Depth of the plane through (0, 0, z), tilted about the x axis."""
    intr = intr or CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)
    rows, cols = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
    # ray (x, y, 1) * d meets the plane  n.(p - p0) = 0  with n = (0, -sin, cos)
    a = np.radians(tilt_deg)
    ry = (rows - intr.cy) / intr.fy
    depth = z * np.cos(a) / (np.cos(a) - np.sin(a) * ry)
    if noise > 0:
        depth = depth + np.random.default_rng(seed).normal(0, noise, depth.shape)
    rgb = np.zeros(intr.shape + (3,), np.uint8)
    rgb[..., 0] = (cols * 7 + rows * 3) % 256
    return DepthFrame(depth, rgb, intr, index)


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def frame_points(frame: DepthFrame) -> np.ndarray:
    intr = frame.intrinsics
    rows, cols = np.nonzero(frame.valid)
    return lift(intr, cols.astype(float), rows.astype(float), frame.depth[rows, cols])


@pytest.fixture
def intr100():
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)
