"""Per-frame reconstruction loop.

The model is kept in the coordinates of the most recent camera. For every new
frame: predict which surfels the frame sees, render them into a model view,
find keypoint correspondences, estimate a rigid initialisation with RANSAC,
solve the deformation field with LM, warp the whole model (unseen surfels
ride along the regularised field), fuse the observed depth, insert newly
observed surface and resample the deformation graph.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .config import PipelineConfig
from .correspond import (
    CorrespondenceSet,
    NCCProvider,
    render_model_view,
    ransac_rigid,
)
from .energy import FrameTarget, WarpProblem, predict_visible
from .fusion import fuse_depth, insert_new_points
from .geometry import estimate_normals, smooth_depth
from .io import write_ply
from .solver import SolveReport, lm_solve
from .types import (
    DefSlamError,
    DepthFrame,
    NoConstraints,
    NoFrames,
    PoseInitFailed,
    RigidTransform,
    SurfelCloud,
)
from .warp import Bindings, EDGraph, apply_warp, bind_k, bind_points, sample_nodes, warp_points

logger = logging.getLogger(__name__)


@dataclass
class ReconstructionState:
    model: SurfelCloud = field(default_factory=SurfelCloud)
    graph: EDGraph | None = None
    bindings: Bindings | None = None
    world_to_camera: RigidTransform = field(default_factory=RigidTransform)
    frames_seen: int = 0

    @property
    def camera_pose(self) -> RigidTransform:
        """Current camera-to-world pose, world being the first camera."""
        return self.world_to_camera.inverse()


@dataclass
class FrameReport:
    frame_index: int
    status: str  # initialized | fused | discarded | skipped
    n_visible: int = 0
    n_correspondences: int = 0
    n_inliers: int = 0
    rigid_init: RigidTransform = field(default_factory=RigidTransform)
    solve: SolveReport | None = None
    mean_residual: float = 0.0
    max_residual: float = 0.0
    n_fused: int = 0
    n_inserted: int = 0
    model_size: int = 0
    timings: dict = field(default_factory=dict)
    camera_pose: RigidTransform = field(default_factory=RigidTransform)


SUMMARY_SCHEMA_VERSION = 1
SUMMARY_COLUMNS = [
    "schema_version", "frame", "status", "n_visible", "n_correspondences", "n_inliers",
    "rigid_rot_deg", "rigid_tx", "rigid_ty", "rigid_tz", "lm_iterations", "lm_reason",
    "energy_initial", "energy_final", "mean_residual_mm", "max_residual_mm",
    "n_fused", "n_inserted", "model_size", "time_total_s",
]


def report_row(r: FrameReport) -> list:
    s = r.solve
    t = r.rigid_init.translation
    return [
        SUMMARY_SCHEMA_VERSION, r.frame_index, r.status, r.n_visible, r.n_correspondences, r.n_inliers,
        f"{r.rigid_init.rotation_angle_deg():.6f}", f"{t[0]:.6f}", f"{t[1]:.6f}", f"{t[2]:.6f}",
        s.iterations if s else 0, s.reason if s else "",
        f"{s.initial_energy:.9g}" if s else "", f"{s.final_energy:.9g}" if s else "",
        f"{r.mean_residual:.6f}", f"{r.max_residual:.6f}",
        r.n_fused, r.n_inserted, r.model_size, f"{sum(r.timings.values()):.4f}",
    ]


def preprocess(frame: DepthFrame, cfg: PipelineConfig) -> DepthFrame:
    if cfg.depth_smooth_px <= 0:
        return frame
    return replace(frame, depth=smooth_depth(frame.depth, cfg.depth_smooth_px, cfg.depth_smooth_mm))


def resample_graph(model: SurfelCloud, cfg: PipelineConfig) -> tuple[EDGraph, Bindings | None]:
    graph = sample_nodes(model, cfg.node_spacing, cfg.graph_neighbors)
    if len(graph) < 2:
        return graph, None
    return graph, bind_points(graph, model.positions, bind_k(graph, cfg.bind_k))


def point_to_plane(graph: EDGraph, points: np.ndarray, bindings: Bindings, target: FrameTarget) -> np.ndarray:
    """Unweighted point-to-plane residuals of associated warped points."""
    v = warp_points(graph, bindings, points)
    ok, q, n, _ = target.associate(v)
    return np.sum(n[ok] * (v[ok] - q[ok]), axis=1)


class _Timer:
    def __init__(self):
        self.t = {}
        self._last = time.perf_counter()

    def lap(self, name):
        now = time.perf_counter()
        self.t[name] = self.t.get(name, 0.0) + now - self._last
        self._last = now


def process_frame(
    state: ReconstructionState,
    frame: DepthFrame,
    cfg: PipelineConfig | None = None,
    provider=None,
    trace: list | None = None,
) -> tuple[ReconstructionState, FrameReport]:
    """Register the model to ``frame`` and fuse it. Returns the new state and a report.

    ``state`` itself is never mutated; a discarded frame returns it unchanged.
    """
    cfg = cfg or PipelineConfig()
    provider = provider or NCCProvider(cfg.matcher)
    timer = _Timer()
    fr = preprocess(frame, cfg)
    target = FrameTarget(fr)
    timer.lap("preprocess")

    if len(state.model) == 0:
        model, n_ins = insert_new_points(state.model, target, cfg.fusion)
        if len(model) == 0:
            return state, FrameReport(frame.frame_index, "skipped", timings=timer.t)
        model.normals = estimate_normals(model.positions, cfg.normal_k, model.normals)
        graph, bindings = resample_graph(model, cfg)
        timer.lap("insert")
        new = ReconstructionState(model, graph, bindings, state.world_to_camera, state.frames_seen + 1)
        return new, FrameReport(
            frame.frame_index, "initialized", n_inserted=n_ins, model_size=len(model),
            timings=timer.t, camera_pose=new.camera_pose,
        )

    work = state.model.copy()
    graph = state.graph.copy()
    graph.reset()
    bindings = state.bindings
    report = FrameReport(frame.frame_index, "fused")

    # the model sits in the previous camera frame, so its z-buffered rendering
    # is the previous view; gating it by the new frame would be premature
    view = render_model_view(work, fr.intrinsics)
    timer.lap("visible")
    corrs = provider.find(work, None, view, fr)
    report.n_correspondences = len(corrs)
    timer.lap("match")

    T = RigidTransform()
    if cfg.rigid_init and len(corrs):
        try:
            T, mask = ransac_rigid(corrs, cfg.ransac)
            corrs.inlier_mask = mask
        except PoseInitFailed as exc:
            logger.warning("frame %d: rigid init failed (%s); using identity", frame.frame_index, exc)
            corrs.inlier_mask = np.zeros(len(corrs), dtype=bool)
    elif len(corrs):
        corrs.inlier_mask = np.ones(len(corrs), dtype=bool)
    report.n_inliers = int(corrs.inlier_mask.sum())
    report.rigid_init = T
    work.positions = T.apply(work.positions)
    work.normals = T.apply_normals(work.normals)
    graph.transform_rigid(T.rotation, T.translation)
    corrs = corrs.transformed(T)
    timer.lap("ransac")

    visible = predict_visible(work, target, cfg.visibility)
    report.n_visible = len(visible)
    if bindings is None:
        # single-node graph: the rigid initialisation is the whole registration
        report.status = "skipped"
        logger.warning("frame %d: deformation graph too small, frame skipped", frame.frame_index)
        return state, report

    src, dst = corrs.inliers()
    k = bindings.k
    try:
        problem = WarpProblem(
            graph,
            work.positions[visible],
            bindings.subset(visible),
            target if len(visible) else None,
            src,
            dst,
            bind_points(graph, src, k) if len(src) else None,
            cfg.weights,
        )
    except NoConstraints:
        report.status = "skipped"
        logger.warning("frame %d: model and frame share no overlap, frame skipped", frame.frame_index)
        return state, report
    x, solve, _ = lm_solve(problem, graph.params(), cfg.solver)
    graph.set_params(x)
    report.solve = solve
    if trace is not None:
        trace.extend((frame.frame_index, *row) for row in solve.trace)
    timer.lap("solve")

    if len(visible):
        res = np.abs(point_to_plane(graph, work.positions[visible], bindings.subset(visible), target))
        if len(res):
            report.mean_residual = float(res.mean())
            report.max_residual = float(res.max())
    if report.mean_residual > cfg.frame_skip_error_threshold:
        report.status = "discarded"
        report.model_size = len(state.model)
        report.camera_pose = state.camera_pose
        report.timings = timer.t
        logger.info("frame %d discarded: mean residual %.3f mm", frame.frame_index, report.mean_residual)
        return state, report

    warped = apply_warp(graph, work, bindings)
    warped.normals = estimate_normals(warped.positions, cfg.normal_k, warped.normals)
    timer.lap("warp")
    vis = predict_visible(warped, target, cfg.visibility)
    fused, stats = fuse_depth(warped, graph, bindings, target, cfg.fusion, visible=vis)
    report.n_fused = stats.n_fused
    vis = predict_visible(fused, target, cfg.visibility)
    model, n_ins = insert_new_points(fused, target, cfg.fusion, visible=vis)
    report.n_inserted = n_ins
    timer.lap("fuse")
    new_graph, new_bindings = resample_graph(model, cfg)
    timer.lap("resample")
    w2c = T.compose(state.world_to_camera)
    new = ReconstructionState(model, new_graph, new_bindings, w2c, state.frames_seen + 1)
    report.model_size = len(model)
    report.camera_pose = new.camera_pose
    report.timings = timer.t
    return new, report


@dataclass
class SequenceResult:
    reports: list
    state: ReconstructionState
    summary: dict


def summarize(reports: list) -> dict:
    used = [r for r in reports if r.status == "fused"]
    res = [r.mean_residual for r in used]
    return {
        "frames": len(reports),
        "fused": len(used),
        "discarded": sum(r.status == "discarded" for r in reports),
        "skipped": sum(r.status == "skipped" for r in reports),
        "mean_residual_mm": float(np.mean(res)) if res else 0.0,
        "final_model_size": reports[-1].model_size if reports else 0,
    }


def run_sequence(
    frames: Iterable[DepthFrame],
    cfg: PipelineConfig | None = None,
    provider=None,
    export_dir: str | Path | None = None,
    export_every: int = 0,
    on_frame: Callable | None = None,
    trace: list | None = None,
) -> SequenceResult:
    """Fold ``process_frame`` over a frame sequence.

    With ``export_dir`` and ``export_every > 0`` a ``model_%06d.ply`` is written
    after every ``export_every``-th frame (1-based count). ``on_frame`` is called
    as ``on_frame(state, report, frame)`` after each frame.
    """
    cfg = cfg or PipelineConfig()
    state = ReconstructionState()
    reports = []
    count = 0
    for frame in frames:
        count += 1
        try:
            state, rep = process_frame(state, frame, cfg, provider, trace)
        except (OSError, DefSlamError) as exc:
            raise type(exc)(f"frame {frame.frame_index}: {exc}") from exc
        reports.append(rep)
        if on_frame is not None:
            on_frame(state, rep, frame)
        if export_dir is not None and export_every > 0 and count % export_every == 0:
            write_ply(Path(export_dir) / f"model_{count:06d}.ply", state.model)
    if count == 0:
        raise NoFrames("no frames to process")
    return SequenceResult(reports, state, summarize(reports))
