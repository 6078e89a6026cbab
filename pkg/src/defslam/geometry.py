"""Pinhole projection, depth-map lifting, normals and voxel downsampling."""

from __future__ import annotations

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .types import CameraIntrinsics, DepthFrame


def project(intr: CameraIntrinsics, v) -> tuple[float, float] | None:
    """Project one camera-space point; ``None`` if behind the camera or off-image."""
    x, y, z = (float(c) for c in v)
    if z <= 0:
        return None
    u = intr.fx * x / z + intr.cx
    w = intr.fy * y / z + intr.cy
    if not in_bounds(intr, np.array([u]), np.array([w]))[0]:
        return None
    return (u, w)


def in_bounds(intr: CameraIntrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # A projection is inside when it rounds to an existing pixel.
    return (u >= -0.5) & (u < intr.width - 0.5) & (v >= -0.5) & (v < intr.height - 0.5)


def project_points(intr: CameraIntrinsics, pts: np.ndarray):
    """Vectorised projection.

    Returns ``(uv, pix, ok)``: float pixel coordinates ``(N, 2)``, the rounded
    integer pixel ``(N, 2)`` as (col, row), and a validity mask.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    front = z > 1e-12
    zs = np.where(front, z, 1.0)
    u = intr.fx * pts[:, 0] / zs + intr.cx
    v = intr.fy * pts[:, 1] / zs + intr.cy
    ok = front & in_bounds(intr, u, v)
    pix = np.zeros((len(pts), 2), dtype=np.int64)
    pix[ok, 0] = np.rint(u[ok]).astype(np.int64)
    pix[ok, 1] = np.rint(v[ok]).astype(np.int64)
    return np.stack([u, v], axis=1), pix, ok


def back_project(frame: DepthFrame, u) -> np.ndarray | None:
    """Lift integer pixel ``(col, row)`` through its depth; ``None`` if invalid."""
    col, row = int(u[0]), int(u[1])
    intr = frame.intrinsics
    if not (0 <= col < intr.width and 0 <= row < intr.height):
        return None
    d = frame.depth[row, col]
    if d <= 0:
        return None
    return np.array([(col - intr.cx) * d / intr.fx, (row - intr.cy) * d / intr.fy, d])


def lift(intr: CameraIntrinsics, u: np.ndarray, v: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Back-project arrays of (possibly fractional) pixel coordinates with depths."""
    return np.stack([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d], axis=-1)


def vertex_map(frame: DepthFrame) -> np.ndarray:
    """``(H, W, 3)`` back-projected points; invalid pixels hold zeros."""
    intr = frame.intrinsics
    rows, cols = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
    return lift(intr, cols, rows, frame.depth)


def depth_normals(frame: DepthFrame) -> np.ndarray:
    """Per-pixel unit normals from central differences of the vertex map.

    Normals face the camera (``n.z < 0`` on a frontal plane). Pixels on the
    border or next to an invalid depth get NaN.
    """
    V = vertex_map(frame)
    valid = frame.valid
    H, W = valid.shape
    out = np.full((H, W, 3), np.nan)
    if H < 3 or W < 3:
        return out
    ok = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )
    du = V[1:-1, 2:] - V[1:-1, :-2]
    dv = V[2:, 1:-1] - V[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = n / np.where(norm > 1e-12, norm, 1.0)[..., None]
    # face the camera: n . v < 0
    flip = np.sum(n * V[1:-1, 1:-1], axis=-1) > 0
    n[flip] *= -1.0
    n[~ok] = np.nan
    out[1:-1, 1:-1] = n
    return out


def voxel_downsample(points, cell: float, *attrs):
    """Average points falling into each ``cell``-sized voxel (origin at 0).

    Output order is sorted by voxel key. Extra per-point arrays in ``attrs`` are
    averaged the same way and returned after the points.
    """
    if cell <= 0:
        raise ValueError("cell must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        empty = [np.zeros((0,) + np.asarray(a).shape[1:]) for a in attrs]
        return (pts, *empty) if attrs else pts
    keys = np.floor(pts / cell).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)

    def mean(a):
        a = np.asarray(a, dtype=np.float64)
        flat = a.reshape(len(a), -1)
        out = np.zeros((len(counts), flat.shape[1]))
        for c in range(flat.shape[1]):
            out[:, c] = np.bincount(inv, weights=flat[:, c], minlength=len(counts))
        out /= counts[:, None]
        return out.reshape((len(counts),) + a.shape[1:])

    centroids = mean(pts)
    if not attrs:
        return centroids
    return (centroids, *(mean(a) for a in attrs))


def estimate_normals(points: np.ndarray, k: int = 8, fallback: np.ndarray | None = None) -> np.ndarray:
    """PCA normals over each point and its ``k`` nearest neighbours, facing the origin."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if fallback is None:
        fallback = np.tile([0.0, 0.0, -1.0], (n, 1))
    if n < 3:
        return np.asarray(fallback, dtype=np.float64).copy()
    kk = min(k + 1, n)
    _, nbr = cKDTree(pts).query(pts, k=kk)
    P = pts[nbr]  # (n, kk, 3)
    P = P - P.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", P, P)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.sum(normals * pts, axis=1) > 0
    normals[flip] *= -1.0
    return normals


def smooth_depth(depth: np.ndarray, sigma_px: float, sigma_mm: float) -> np.ndarray:
    """Edge-preserving bilateral filter of a depth map; invalid pixels stay 0."""
    if sigma_px <= 0:
        return np.asarray(depth, dtype=np.float64).copy()
    d32 = np.asarray(depth, dtype=np.float32)
    diameter = int(2 * np.ceil(2 * sigma_px) + 1)
    out = cv2.bilateralFilter(d32, diameter, float(sigma_mm), float(sigma_px))
    out = out.astype(np.float64)
    out[depth <= 0] = 0.0
    return out
