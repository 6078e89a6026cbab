"""Embedded deformation graph: nodes, point bindings and the warp field.

A point ``v`` bound to nodes ``j`` with weights ``w_j`` is warped to

    sum_j w_j * (A_j (v - g_j) + g_j + t_j)

where ``g_j`` is the node position, ``A_j`` a 3x3 affine and ``t_j`` a
translation. The optimiser sees the node parameters as one flat vector with
12 entries per node: ``A_j`` row-major followed by ``t_j``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import voxel_downsample
from .types import EmptyModel, InsufficientNodes, SurfelCloud

logger = logging.getLogger(__name__)

PARAMS_PER_NODE = 12


@dataclass
class EDGraph:
    positions: np.ndarray  # (m, 3) node positions g_j
    A: np.ndarray  # (m, 3, 3)
    t: np.ndarray  # (m, 3)
    edges: np.ndarray  # (E, 2) directed (j, k), symmetric as a set
    edge_weights: np.ndarray  # (E,) alpha_jk
    node_spacing: float = 4.0
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def num_params(self) -> int:
        return PARAMS_PER_NODE * len(self)

    def neighbors(self, j: int) -> np.ndarray:
        return self.edges[self.edges[:, 0] == j, 1]

    def reset(self) -> None:
        """Identity warp: every ``A = I`` and ``t = 0``."""
        self.A = np.tile(np.eye(3), (len(self), 1, 1))
        self.t = np.zeros((len(self), 3))

    def params(self) -> np.ndarray:
        return np.concatenate([self.A.reshape(-1, 9), self.t], axis=1).reshape(-1)

    def set_params(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, PARAMS_PER_NODE)
        self.A = x[:, :9].reshape(-1, 3, 3).copy()
        self.t = x[:, 9:].copy()

    def with_params(self, x: np.ndarray) -> "EDGraph":
        g = EDGraph(self.positions, self.A, self.t, self.edges, self.edge_weights, self.node_spacing)
        g.set_params(x)
        return g

    def copy(self) -> "EDGraph":
        return EDGraph(
            self.positions.copy(), self.A.copy(), self.t.copy(),
            self.edges.copy(), self.edge_weights.copy(), self.node_spacing,
        )

    def set_rigid(self, R: np.ndarray, T: np.ndarray) -> None:
        """Parameters that make the field the global rigid motion ``x -> R x + T``."""
        self.A = np.tile(np.asarray(R, dtype=np.float64), (len(self), 1, 1))
        self.t = self.positions @ np.asarray(R).T + np.asarray(T) - self.positions

    def transform_rigid(self, R: np.ndarray, T: np.ndarray) -> None:
        """Move the node positions themselves rigidly (bindings stay valid)."""
        self.positions = self.positions @ np.asarray(R).T + np.asarray(T)


def build_graph(node_positions: np.ndarray, spacing: float, graph_neighbors: int = 6) -> EDGraph:
    """Graph over given node positions with symmetrised k-NN edges, alpha = 1."""
    g = np.asarray(node_positions, dtype=np.float64).reshape(-1, 3)
    m = len(g)
    edges = np.zeros((0, 2), dtype=np.int64)
    if m > 1:
        kk = min(graph_neighbors, m - 1)
        _, nbr = cKDTree(g).query(g, k=kk + 1)
        nbr = np.asarray(nbr).reshape(m, kk + 1)
        pairs = set()
        for j in range(m):
            for k in nbr[j]:
                k = int(k)
                if k != j:
                    pairs.add((j, k))
                    pairs.add((k, j))
        edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    graph = EDGraph(
        positions=g,
        A=np.tile(np.eye(3), (m, 1, 1)),
        t=np.zeros((m, 3)),
        edges=edges,
        edge_weights=np.ones(len(edges)),
        node_spacing=float(spacing),
    )
    return graph


def sample_nodes(cloud: SurfelCloud | np.ndarray, spacing: float = 4.0, graph_neighbors: int = 6) -> EDGraph:
    """Uniform node sampling by voxel averaging of the model positions."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = cloud.positions if isinstance(cloud, SurfelCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyModel("cannot sample deformation nodes from an empty model")
    return build_graph(voxel_downsample(pts, spacing), spacing, graph_neighbors)


@dataclass
class Bindings:
    node_ids: np.ndarray  # (N, k) int
    weights: np.ndarray  # (N, k) normalised, rows sum to 1
    dmin: np.ndarray  # (N,) distance to the nearest bound node

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def k(self) -> int:
        return self.node_ids.shape[1]

    def subset(self, idx) -> "Bindings":
        return Bindings(self.node_ids[idx], self.weights[idx], self.dmin[idx])


def binding_weights(dist: np.ndarray) -> np.ndarray:
    """Normalised weights from sorted distances to the ``k + 1`` nearest nodes.

    Raw weight ``1 - d_j / d_max`` over the first ``k`` columns, ``d_max`` being
    the last column. Rows whose raw weights all vanish (degenerate ties) fall
    back to uniform weights.
    """
    dist = np.atleast_2d(dist)
    dmax = dist[:, -1:]
    safe = np.where(dmax > 0, dmax, 1.0)
    raw = np.where(dmax > 0, 1.0 - dist[:, :-1] / safe, 1.0)
    raw = np.clip(raw, 0.0, None)
    s = raw.sum(axis=1, keepdims=True)
    k = raw.shape[1]
    return np.where(s > 0, raw / np.where(s > 0, s, 1.0), 1.0 / k)


def bind_points(graph: EDGraph, points: np.ndarray, k: int = 4) -> Bindings:
    """Bind each point to its ``k`` nearest nodes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(graph) < k + 1:
        raise InsufficientNodes(f"binding needs {k + 1} nodes, graph has {len(graph)}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return Bindings(np.zeros((0, k), np.int64), np.zeros((0, k)), np.zeros(0))
    dist, ids = cKDTree(graph.positions).query(pts, k=k + 1)
    dist = np.asarray(dist).reshape(len(pts), k + 1)
    ids = np.asarray(ids).reshape(len(pts), k + 1)
    return Bindings(ids[:, :k].astype(np.int64), binding_weights(dist), dist[:, 0].copy())


def bind_k(graph: EDGraph, k: int) -> int:
    """Largest usable binding count not exceeding ``k`` for this graph."""
    return max(1, min(k, len(graph) - 1))


def warp_points(graph: EDGraph, bindings: Bindings, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ids = bindings.node_ids
    G = graph.positions[ids]  # (N, k, 3)
    # v + sum_j w_j ((A_j - I)(v - g_j) + t_j): equal to the blended form since
    # the weights sum to 1, and exact for the identity field.
    D = graph.A[ids] - np.eye(3)
    local = np.einsum("nkij,nkj->nki", D, pts[:, None, :] - G)
    return pts + np.einsum("nk,nki->ni", bindings.weights, local + graph.t[ids])


def warp_point(graph: EDGraph, binding: Bindings, v) -> np.ndarray:
    """Single-point convenience wrapper; ``binding`` holds one row."""
    return warp_points(graph, binding, np.asarray(v, dtype=np.float64)[None])[0]


def _inverse_transposes(graph: EDGraph) -> tuple[np.ndarray, np.ndarray]:
    det = np.linalg.det(graph.A)
    singular = np.abs(det) < 1e-12
    M = graph.A.copy()
    ok = ~singular
    if ok.any():
        M[ok] = np.transpose(np.linalg.inv(graph.A[ok]), (0, 2, 1))
    return M, singular


def warp_normals(graph: EDGraph, bindings: Bindings, normals: np.ndarray) -> np.ndarray:
    """Blend of per-node inverse-transpose maps, renormalised.

    Nodes with a singular ``A`` use ``A`` itself; their ids are recorded in
    ``graph.diagnostics['singular_nodes']``.
    """
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    M, singular = _inverse_transposes(graph)
    if singular.any():
        graph.diagnostics["singular_nodes"] = np.flatnonzero(singular)
        logger.warning("%d deformation nodes have singular affines", int(singular.sum()))
    ids = bindings.node_ids
    out = n + np.einsum("nk,nkij,nj->ni", bindings.weights, M[ids] - np.eye(3), n)
    changed = np.any(out != n, axis=1)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    good = changed[:, None] & (norm > 1e-15)
    return np.where(good, out / np.where(norm > 1e-15, norm, 1.0), n)


def warp_normal(graph: EDGraph, binding: Bindings, n) -> np.ndarray:
    return warp_normals(graph, binding, np.asarray(n, dtype=np.float64)[None])[0]


def apply_warp(graph: EDGraph, cloud: SurfelCloud, bindings: Bindings) -> SurfelCloud:
    """Warp every surfel's position and normal; weights and colours are kept."""
    if len(bindings) != len(cloud):
        raise ValueError("bindings must cover every surfel")
    out = cloud.copy()
    out.positions = warp_points(graph, bindings, cloud.positions)
    out.normals = warp_normals(graph, bindings, cloud.normals)
    return out
