"""Four-term warp objective with analytic Jacobians.

Each term is kept in residual form so that its contribution to the energy is
the sum of squared residuals, scaled by ``sqrt(weight)``:

* rotation: six column-orthonormality residuals per node affine,
* regularisation: disagreement of neighbouring node transforms at each
  other's positions, per directed edge,
* data: point-to-plane distance of each warped visible surfel to the depth
  point its projection lands on (projective association),
* correspondence: warped keypoint minus its matched frame point.

Parameter layout per node is ``A`` row-major then ``t`` (12 entries), so the
derivative of a warped point's component ``r`` w.r.t. ``A_j[r, c]`` is
``w_j * (v - g_j)[c]`` and w.r.t. ``t_j[r]`` is ``w_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .geometry import depth_normals, project_points, vertex_map
from .types import DepthFrame, NoConstraints, SurfelCloud
from .warp import PARAMS_PER_NODE, Bindings, EDGraph, warp_points

TERMS = ("rot", "reg", "data", "corr")


@dataclass
class EnergyWeights:
    w_rot: float = 1000.0
    w_reg: float = 10000.0
    w_data: float = 1.0
    w_corr: float = 1.0

    def __post_init__(self):
        if min(self.w_rot, self.w_reg, self.w_data, self.w_corr) < 0:
            raise ValueError("term weights must be non-negative")

    def of(self, term: str) -> float:
        return getattr(self, "w_" + term)


@dataclass
class VisibilityParams:
    eps_d: float = 10.0  # mm
    eps_n: float = 60.0  # degrees
    use_distance_field: bool = True
    df_cell: float = 2.0  # mm

    def __post_init__(self):
        if self.eps_d <= 0:
            raise ValueError("eps_d must be positive")
        if not 0 < self.eps_n < 90:
            raise ValueError("eps_n must lie in (0, 90) degrees")


class FrameTarget:
    """A depth frame with its vertex and normal maps computed once."""

    def __init__(self, frame: DepthFrame, normals: np.ndarray | None = None):
        self.frame = frame
        self.intrinsics = frame.intrinsics
        self.vertices = vertex_map(frame)
        self.normals = depth_normals(frame) if normals is None else normals
        self.has_normal = np.all(np.isfinite(self.normals), axis=-1)
        self.valid = frame.valid

    def associate(self, pts: np.ndarray):
        """Projective association: ``(ok, target_points, target_normals, pix)``.

        ``ok`` is false where the projection leaves the image or lands on an
        invalid depth.
        """
        _, pix, ok = project_points(self.intrinsics, pts)
        rows, cols = pix[:, 1], pix[:, 0]
        ok = ok.copy()
        ok[ok] = self.valid[rows[ok], cols[ok]]
        q = np.zeros((len(pts), 3))
        n = np.zeros((len(pts), 3))
        q[ok] = self.vertices[rows[ok], cols[ok]]
        n[ok] = self.normals[rows[ok], cols[ok]]
        ok &= np.all(np.isfinite(n), axis=1)
        n[~ok] = 0.0
        return ok, q, n, pix


# -- rotation ---------------------------------------------------------------

_ROT_PAIRS = ((0, 1), (0, 2), (1, 2), (0, 0), (1, 1), (2, 2))


def rot_residuals(A: np.ndarray) -> np.ndarray:
    """``(c1.c2, c1.c3, c2.c3, c1.c1-1, c2.c2-1, c3.c3-1)`` for one affine or a batch."""
    A = np.asarray(A, dtype=np.float64)
    single = A.ndim == 2
    A = A.reshape(-1, 3, 3)
    r = np.stack(
        [np.einsum("nr,nr->n", A[:, :, a], A[:, :, b]) - (1.0 if a == b else 0.0) for a, b in _ROT_PAIRS],
        axis=1,
    )
    return r[0] if single else r


def rot_energy(A: np.ndarray) -> float:
    return float(np.sum(rot_residuals(A) ** 2))


def rot_jacobian(A: np.ndarray) -> np.ndarray:
    """``(m, 6, 9)`` derivatives of the rotation residuals w.r.t. row-major ``A``."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3, 3)
    J = np.zeros((len(A), 6, 3, 3))
    for i, (a, b) in enumerate(_ROT_PAIRS):
        J[:, i, :, a] += A[:, :, b]
        J[:, i, :, b] += A[:, :, a]
    return J.reshape(len(A), 6, 9)


# -- regularisation -----------------------------------------------------------


def reg_residuals(graph: EDGraph, j: int, k: int) -> np.ndarray:
    """Disagreement between node ``j``'s transform and node ``k``'s at ``g_k``."""
    a = np.sqrt(1.0 if graph.edge_weights is None else _alpha(graph, j, k))
    gj, gk = graph.positions[j], graph.positions[k]
    return a * (graph.A[j] @ (gk - gj) + gj + graph.t[j] - (gk + graph.t[k]))


def _alpha(graph: EDGraph, j: int, k: int) -> float:
    hit = np.flatnonzero((graph.edges[:, 0] == j) & (graph.edges[:, 1] == k))
    return float(graph.edge_weights[hit[0]]) if len(hit) else 1.0


def reg_residuals_all(graph: EDGraph) -> np.ndarray:
    """``(E, 3)`` residuals for every directed edge, in edge order."""
    if len(graph.edges) == 0:
        return np.zeros((0, 3))
    j, k = graph.edges[:, 0], graph.edges[:, 1]
    gj, gk = graph.positions[j], graph.positions[k]
    r = np.einsum("eab,eb->ea", graph.A[j], gk - gj) + gj + graph.t[j] - gk - graph.t[k]
    return np.sqrt(graph.edge_weights)[:, None] * r


# -- data / correspondence ----------------------------------------------------


def data_residual(graph: EDGraph, binding: Bindings, surfel_position, frame: DepthFrame | FrameTarget) -> float:
    """Signed point-to-plane distance of one warped surfel; 0 if unassociated.

    With the camera-facing normal convention a surfel behind the observed
    surface (further from the camera) gets a negative residual.
    """
    target = frame if isinstance(frame, FrameTarget) else FrameTarget(frame)
    v = warp_points(graph, binding, np.asarray(surfel_position, dtype=np.float64)[None])
    ok, q, n, _ = target.associate(v)
    if not ok[0]:
        return 0.0
    return float(n[0] @ (v[0] - q[0]))


def corr_residual(graph: EDGraph, binding: Bindings, src, dst) -> np.ndarray:
    return warp_points(graph, binding, np.asarray(src, dtype=np.float64)[None])[0] - np.asarray(dst, dtype=np.float64)


# -- visibility ---------------------------------------------------------------


def distance_field_reject(points: np.ndarray, frame_points: np.ndarray, eps_d: float, cell: float) -> np.ndarray:
    """Conservative prefilter: True where a point is provably > ``eps_d`` from every frame point.

    A voxel grid over the frame points stores the Euclidean distance (in
    cells) to the nearest occupied voxel; with half-diagonal ``h`` the true
    distance of a query is at least ``edt * cell - 2h``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(frame_points) == 0:
        return np.ones(len(pts), dtype=bool)
    h = cell * np.sqrt(3.0) / 2.0
    pad = int(np.ceil((eps_d + 2 * h) / cell)) + 1
    lo = np.floor(frame_points.min(axis=0) / cell).astype(np.int64) - pad
    hi = np.floor(frame_points.max(axis=0) / cell).astype(np.int64) + pad
    shape = tuple(int(s) for s in hi - lo + 1)
    occ = np.zeros(shape, dtype=bool)
    fk = np.floor(frame_points / cell).astype(np.int64) - lo
    occ[fk[:, 0], fk[:, 1], fk[:, 2]] = True
    edt = ndimage.distance_transform_edt(~occ)
    qk = np.floor(pts / cell).astype(np.int64) - lo
    inside = np.all((qk >= 0) & (qk < np.array(shape)), axis=1)
    reject = np.ones(len(pts), dtype=bool)
    d = edt[qk[inside, 0], qk[inside, 1], qk[inside, 2]] * cell - 2 * h
    reject[inside] = d > eps_d
    return reject


def predict_visible(
    cloud: SurfelCloud,
    frame: DepthFrame | FrameTarget,
    params: VisibilityParams | None = None,
) -> np.ndarray:
    """Sorted indices of surfels compatible with the frame in distance and normal."""
    params = params or VisibilityParams()
    target = frame if isinstance(frame, FrameTarget) else FrameTarget(frame)
    pts = cloud.positions
    cand = np.arange(len(pts))
    if len(pts) == 0:
        return cand
    if params.use_distance_field:
        fp = target.vertices[target.valid]
        cand = cand[~distance_field_reject(pts, fp, params.eps_d, params.df_cell)]
    ok, q, n, _ = target.associate(pts[cand])
    dist = np.linalg.norm(pts[cand] - q, axis=1)
    sn = cloud.normals[cand]
    cos = np.sum(sn * n, axis=1)
    keep = ok & (dist < params.eps_d) & (cos > np.cos(np.radians(params.eps_n)))
    return cand[keep]


# -- assembly -----------------------------------------------------------------


@dataclass
class EnergyState:
    x: np.ndarray
    residuals: np.ndarray  # scaled by sqrt(term weight)
    jacobian: sp.csr_matrix | None
    slices: dict
    energies: dict  # weighted, per term
    association: np.ndarray | None = None  # data-term mask (which points contributed)
    extra: dict = field(default_factory=dict)

    @property
    def energy(self) -> float:
        return float(self.residuals @ self.residuals)

    def unweighted(self, term: str, weights: EnergyWeights) -> float:
        w = weights.of(term)
        return self.energies[term] / w if w > 0 else float(np.sum(self.residuals[self.slices[term]] ** 2))


class WarpProblem:
    """The least-squares problem over one graph's stacked node parameters.

    ``points``/``bindings`` are the visible surfels; ``src``/``dst`` with
    ``src_bindings`` are correspondence pairs.

    With ``per_iteration`` (the default) the solver re-associates the data term
    once per LM iteration through ``begin_iteration`` and trial steps are scored
    against the same pixel targets; otherwise ``evaluate`` re-associates on
    every call. ``freeze_association`` pins the targets regardless.
    """

    def __init__(
        self,
        graph: EDGraph,
        points: np.ndarray,
        bindings: Bindings,
        target: FrameTarget | None,
        src: np.ndarray | None = None,
        dst: np.ndarray | None = None,
        src_bindings: Bindings | None = None,
        weights: EnergyWeights | None = None,
        per_iteration: bool = True,
    ):
        self.graph = graph
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.bindings = bindings
        self.target = target
        self.src = np.zeros((0, 3)) if src is None else np.asarray(src, dtype=np.float64).reshape(-1, 3)
        self.dst = np.zeros((0, 3)) if dst is None else np.asarray(dst, dtype=np.float64).reshape(-1, 3)
        self.src_bindings = src_bindings
        self.weights = weights or EnergyWeights()
        self.per_iteration = per_iteration
        self.frozen = None
        self._previous = None
        self._pinned = False
        m = len(graph)
        self.n = PARAMS_PER_NODE * m
        if target is None:
            self.points = np.zeros((0, 3))
        if len(self.points) == 0 and len(self.src) == 0:
            raise NoConstraints("no visible points and no correspondences")
        self._static_rows()

    def _static_rows(self):
        # row counts per term are fixed; data rows stay allocated even when a
        # point loses its association (zero residual, zero Jacobian)
        m = len(self.graph)
        E = len(self.graph.edges)
        n_rot, n_reg, n_data, n_corr = 6 * m, 3 * E, len(self.points), 3 * len(self.src)
        o = np.cumsum([0, n_rot, n_reg, n_data, n_corr])
        self.slices = {t: slice(int(o[i]), int(o[i + 1])) for i, t in enumerate(TERMS)}
        self.m_rows = int(o[-1])

    def _associate_at(self, x: np.ndarray):
        g = self.graph.with_params(x)
        v = warp_points(g, self.bindings, self.points)
        ok, q, n, _ = self.target.associate(v)
        return ok, q, n

    def freeze_association(self, x: np.ndarray) -> None:
        """Pin the data-term pixel targets to those found for ``x`` until ``unfreeze``."""
        self.frozen = self._associate_at(x) if len(self.points) else None
        self._pinned = True

    def unfreeze(self) -> None:
        self.frozen = None
        self._pinned = False

    def begin_iteration(self, x: np.ndarray) -> None:
        """Re-associate at the linearisation point; trial steps reuse these targets."""
        self._previous = self.frozen
        if self.per_iteration and not self._pinned and len(self.points):
            self.frozen = self._associate_at(x)

    def revert_iteration(self) -> None:
        """Restore the targets in use before the last ``begin_iteration``."""
        self.frozen = self._previous

    def evaluate(self, x: np.ndarray, jacobian: bool = True) -> EnergyState:
        x = np.asarray(x, dtype=np.float64)
        g = self.graph.with_params(x)
        w = self.weights
        r = np.zeros(self.m_rows)
        rows, cols, vals = [], [], []
        energies = {}
        sl = self.slices
        m = len(g)

        # rotation
        s = np.sqrt(w.w_rot)
        rr = rot_residuals(g.A).reshape(m, 6)
        r[sl["rot"]] = s * rr.reshape(-1)
        if jacobian and m:
            Jr = rot_jacobian(g.A)  # (m, 6, 9)
            node = np.repeat(np.arange(m), 6 * 9)
            ri = np.repeat(np.arange(6 * m), 9)
            ci = PARAMS_PER_NODE * node + np.tile(np.arange(9), 6 * m)
            rows.append(sl["rot"].start + ri)
            cols.append(ci)
            vals.append(s * Jr.reshape(-1))

        # regularisation
        E = len(g.edges)
        if E:
            s = np.sqrt(w.w_reg)
            r[sl["reg"]] = s * reg_residuals_all(g).reshape(-1)
            if jacobian:
                j, k = g.edges[:, 0], g.edges[:, 1]
                sa = s * np.sqrt(g.edge_weights)
                d = g.positions[k] - g.positions[j]  # (E, 3)
                base_r = sl["reg"].start + 3 * np.arange(E)
                for comp in range(3):
                    rr_ = base_r + comp
                    for c in range(3):
                        rows.append(rr_)
                        cols.append(PARAMS_PER_NODE * j + 3 * comp + c)
                        vals.append(sa * d[:, c])
                    rows.append(rr_)
                    cols.append(PARAMS_PER_NODE * j + 9 + comp)
                    vals.append(sa)
                    rows.append(rr_)
                    cols.append(PARAMS_PER_NODE * k + 9 + comp)
                    vals.append(-sa)

        # data
        assoc = None
        if len(self.points):
            s = np.sqrt(w.w_data)
            v = warp_points(g, self.bindings, self.points)
            if self.frozen is not None:
                ok, q, n = self.frozen
            else:
                ok, q, n, _ = self.target.associate(v)
            assoc = ok
            res = np.where(ok, np.sum(n * (v - q), axis=1), 0.0)
            r[sl["data"]] = s * res
            if jacobian:
                self._point_jac(rows, cols, vals, sl["data"].start, self.points, self.bindings, n * ok[:, None] * s, g)

        # correspondences
        if len(self.src):
            s = np.sqrt(w.w_corr)
            v = warp_points(g, self.src_bindings, self.src)
            r[sl["corr"]] = s * (v - self.dst).reshape(-1)
            if jacobian:
                for comp in range(3):
                    e = np.zeros((len(self.src), 3))
                    e[:, comp] = s
                    self._point_jac(rows, cols, vals, sl["corr"].start + comp, self.src, self.src_bindings, e, g, stride=3)

        for t in TERMS:
            energies[t] = float(np.sum(r[sl[t]] ** 2))
        J = None
        if jacobian:
            J = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.m_rows, self.n),
            )
        return EnergyState(x.copy(), r, J, dict(sl), energies, assoc)

    @staticmethod
    def _point_jac(rows, cols, vals, row0, pts, bind, dirs, g, stride=1):
        """Jacobian rows of ``dirs[i] . warp(pts[i])`` (one row per point)."""
        N, k = bind.node_ids.shape
        if N == 0:
            return
        ids = bind.node_ids
        d = pts[:, None, :] - g.positions[ids]  # (N, k, 3)
        wgt = bind.weights  # (N, k)
        # dA[r, c] = w * dir[r] * d[c]; dt[r] = w * dir[r]
        dA = wgt[:, :, None, None] * dirs[:, None, :, None] * d[:, :, None, :]  # (N,k,3,3)
        dt = wgt[:, :, None] * dirs[:, None, :]  # (N,k,3)
        blk = np.concatenate([dA.reshape(N, k, 9), dt], axis=2)  # (N, k, 12)
        ci = PARAMS_PER_NODE * ids[:, :, None] + np.arange(PARAMS_PER_NODE)
        ri = np.broadcast_to((row0 + stride * np.arange(N))[:, None, None], ci.shape)
        nz = blk != 0
        rows.append(ri[nz])
        cols.append(ci[nz])
        vals.append(blk[nz])


def assemble(
    graph: EDGraph,
    cloud: SurfelCloud,
    bindings: Bindings,
    frame: DepthFrame | FrameTarget,
    corrs=None,
    weights: EnergyWeights | None = None,
    visible: np.ndarray | None = None,
    vis_params: VisibilityParams | None = None,
    corr_bindings: Bindings | None = None,
) -> tuple[WarpProblem, EnergyState]:
    """Build the warp problem for ``graph``'s current parameters and evaluate it.

    ``corrs`` may be a ``CorrespondenceSet`` (inliers are used) or a
    ``(src, dst)`` pair; ``corr_bindings`` defaults to binding the sources.
    """
    from .warp import bind_points

    target = frame if isinstance(frame, FrameTarget) else FrameTarget(frame)
    if visible is None:
        visible = predict_visible(cloud, target, vis_params)
    src = dst = None
    if corrs is not None:
        if hasattr(corrs, "inliers"):
            src, dst = corrs.inliers()
        else:
            src, dst = corrs
        src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
        dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
        if corr_bindings is None and len(src):
            corr_bindings = bind_points(graph, src, bindings.k)
    problem = WarpProblem(
        graph,
        cloud.positions[visible],
        bindings.subset(visible),
        target if len(visible) else None,
        src,
        dst,
        corr_bindings,
        weights,
    )
    return problem, problem.evaluate(graph.params())
