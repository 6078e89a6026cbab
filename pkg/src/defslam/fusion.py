"""Weighted point-cloud fusion of a new depth frame into the warped model."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .correspond import render_model_view
from .energy import FrameTarget, VisibilityParams, predict_visible
from .geometry import project_points, voxel_downsample
from .types import DepthFrame, SurfelCloud
from .warp import Bindings, EDGraph, warp_normals, warp_points


@dataclass
class FusionParams:
    tau: float = 4.0  # mm, |dz| acceptance
    omega_max: float = 10.0
    eps: float = 4.0  # mm, average node spacing
    insert_cell: float = 0.2  # mm

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.omega_max < 1:
            raise ValueError("omega_max must be >= 1")


def tsdw(dmin, dz, params: FusionParams):
    """Truncated signed-distance weight: ``dmin / (eps / 2)`` inside the band, else 0."""
    dmin = np.asarray(dmin, dtype=np.float64)
    dz = np.asarray(dz, dtype=np.float64)
    w = np.where(np.abs(dz) < params.tau, dmin / (0.5 * params.eps), 0.0)
    return w if w.ndim else float(w)


@dataclass
class FuseStats:
    n_visible: int
    n_fused: int


def fuse_depth(
    cloud: SurfelCloud,
    graph: EDGraph | None,
    bindings: Bindings | None,
    frame: DepthFrame | FrameTarget,
    params: FusionParams | None = None,
    visible: np.ndarray | None = None,
    vis_params: VisibilityParams | None = None,
) -> tuple[SurfelCloud, FuseStats]:
    """Running weighted average of model and observed depth along each surfel's ray.

    ``cloud`` must already be warped into the frame. A surfel fuses only if its
    truncated weight is positive; the observation counts with weight 1 and the
    accumulated weight is capped at ``omega_max``. Colours take the latest
    observation. Without bindings, ``dmin`` falls back to ``eps / 2`` (weight 1).
    """
    params = params or FusionParams()
    target = frame if isinstance(frame, FrameTarget) else FrameTarget(frame)
    fr = target.frame
    out = cloud.copy()
    if visible is None:
        visible = predict_visible(cloud, target, vis_params)
    visible = np.asarray(visible, dtype=np.int64)
    if len(visible) == 0:
        return out, FuseStats(0, 0)
    pts = cloud.positions[visible]
    _, pix, ok = project_points(fr.intrinsics, pts)
    rows, cols = pix[:, 1], pix[:, 0]
    obs = np.zeros(len(pts))
    obs[ok] = fr.depth[rows[ok], cols[ok]]
    ok &= obs > 0
    dz = pts[:, 2] - obs
    if bindings is not None:
        dmin = bindings.dmin[visible]
    else:
        dmin = np.full(len(pts), 0.5 * params.eps)
    w_t = tsdw(dmin, dz, params)
    fuse = ok & (w_t > 0)
    idx = visible[fuse]
    z = pts[fuse, 2]
    w_prev = cloud.weights[idx]
    z_new = (z * w_prev + obs[fuse]) / (w_prev + 1.0)
    pos = out.positions.copy()
    pos[idx] = pts[fuse] * (z_new / z)[:, None]
    out.positions = pos
    out.weights[idx] = np.minimum(w_prev + 1.0, params.omega_max)
    out.colors[idx] = fr.rgb[rows[fuse], cols[fuse]]
    return out, FuseStats(len(visible), int(fuse.sum()))


def coverage_mask(cloud: SurfelCloud, frame: DepthFrame, visible: np.ndarray | None) -> np.ndarray:
    """Pixels within one pixel of a rendered model surfel."""
    view = render_model_view(cloud, frame.intrinsics, visible)
    kernel = np.ones((3, 3), np.uint8)
    return cv2.dilate(view.valid.astype(np.uint8), kernel) > 0


def insert_new_points(
    cloud: SurfelCloud,
    frame: DepthFrame | FrameTarget,
    params: FusionParams | None = None,
    visible: np.ndarray | None = None,
    vis_params: VisibilityParams | None = None,
) -> tuple[SurfelCloud, int]:
    """Add back-projected frame pixels that no model surfel covers.

    Candidates need valid depth and a valid depth normal; they are voxel
    averaged at ``insert_cell`` and enter with weight 1.
    """
    params = params or FusionParams()
    target = frame if isinstance(frame, FrameTarget) else FrameTarget(frame)
    fr = target.frame
    if len(cloud):
        if visible is None:
            visible = predict_visible(cloud, target, vis_params)
        covered = coverage_mask(cloud, fr, visible)
    else:
        covered = np.zeros(fr.intrinsics.shape, dtype=bool)
    cand = target.valid & target.has_normal & ~covered
    if not cand.any():
        return cloud.copy(), 0
    pts = target.vertices[cand]
    nrm = target.normals[cand]
    col = fr.rgb[cand].astype(np.float64)
    if fr.material is not None:
        prov = fr.material[cand]
    else:
        prov = np.full((len(pts), 3), np.nan)
    p, n, c, pv = voxel_downsample(pts, params.insert_cell, nrm, col, prov)
    nn = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(nn > 0, nn, 1.0)
    new = SurfelCloud(p, n, np.clip(np.rint(c), 0, 255).astype(np.uint8), np.ones(len(p)), pv, cloud.index_cell)
    out = cloud.copy()
    out.extend(new)
    return out, len(new)


def predict_unobserved(graph: EDGraph, cloud: SurfelCloud, bindings: Bindings, visible: np.ndarray) -> SurfelCloud:
    """Carry surfels outside ``visible`` along the solved warp field.

    Visible surfels are left as they are; weights and colours never change.
    """
    hidden = np.setdiff1d(np.arange(len(cloud)), np.asarray(visible, dtype=np.int64))
    out = cloud.copy()
    if len(hidden) == 0:
        return out
    b = bindings.subset(hidden)
    pos = out.positions.copy()
    pos[hidden] = warp_points(graph, b, cloud.positions[hidden])
    out.positions = pos
    out.normals[hidden] = warp_normals(graph, b, cloud.normals[hidden])
    return out
