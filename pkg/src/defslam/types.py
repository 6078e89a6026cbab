"""Core value types shared by every stage of the reconstruction.

Conventions
-----------
* Vectors are ``float64`` numpy arrays of shape ``(3,)`` (batches: ``(N, 3)``).
* 3x3 matrices are ``(3, 3)`` arrays, row-major; ``A[:, i]`` is column ``c_{i+1}``.
* Lengths are millimetres. Depth ``0`` marks an invalid pixel.
* Pixel coordinates are ``(u, v)`` = (column, row); integer values sit at pixel
  centres.
* The camera looks down ``+z``; surface normals face the camera (``n.z < 0`` for
  a frontal surface).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DefSlamError(Exception):
    """Base class for reconstruction errors."""


class EmptyModel(DefSlamError):
    pass


class InsufficientNodes(DefSlamError):
    pass


class NoConstraints(DefSlamError):
    pass


class SingularSystem(DefSlamError):
    pass


class PoseInitFailed(DefSlamError):
    pass


class NoFrames(DefSlamError):
    pass


class EmptyRender(DefSlamError):
    pass


def columns(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return the three column vectors ``(c1, c2, c3)`` of a 3x3 matrix."""
    return A[:, 0], A[:, 1], A[:, 2]


@dataclass(frozen=True)
class RigidTransform:
    """``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite rigid transform")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError("rotation is not in SO(3)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_normals(self, normals: np.ndarray) -> np.ndarray:
        return np.asarray(normals, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def rotation_angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_text(self) -> str:
        return f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}\n"

    @classmethod
    def from_text(cls, text: str) -> "CameraIntrinsics":
        parts = text.split()
        if len(parts) != 6:
            raise ValueError("intrinsics must be 'fx fy cx cy width height'")
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        return cls(fx, fy, cx, cy, int(parts[4]), int(parts[5]))


@dataclass
class DepthFrame:
    depth: np.ndarray  # (H, W) float64 mm, 0 = invalid
    rgb: np.ndarray  # (H, W, 3) uint8
    intrinsics: CameraIntrinsics
    frame_index: int = 0
    # Optional ground-truth annotation: per-pixel material (rest) coordinate,
    # NaN where unknown. Only the simulator fills it; the pipeline carries it
    # into surfel provenance so tracked-point errors can be measured.
    material: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.rgb = np.asarray(self.rgb, dtype=np.uint8)
        if self.depth.shape != self.intrinsics.shape:
            raise ValueError(f"depth shape {self.depth.shape} != intrinsics {self.intrinsics.shape}")
        if self.rgb.shape != self.intrinsics.shape + (3,):
            raise ValueError(f"rgb shape {self.rgb.shape} does not match depth")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite and non-negative")

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


class VoxelHash:
    """Uniform voxel hash over a point set, origin fixed at (0, 0, 0)."""

    def __init__(self, points: np.ndarray, cell: float):
        if cell <= 0:
            raise ValueError("cell must be positive")
        self.cell = float(cell)
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.buckets: dict[tuple[int, int, int], np.ndarray] = {}
        if len(self.points) == 0:
            return
        keys = np.floor(self.points / self.cell).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sk = keys[order]
        brk = np.flatnonzero(np.any(np.diff(sk, axis=0) != 0, axis=1)) + 1
        for grp in np.split(order, brk):
            self.buckets[tuple(int(c) for c in keys[grp[0]])] = grp

    def __len__(self) -> int:
        return len(self.points)

    def radius_query(self, q: np.ndarray, radius: float) -> np.ndarray:
        """Indices of points within ``radius`` (inclusive) of ``q``, sorted."""
        q = np.asarray(q, dtype=np.float64)
        lo = np.floor((q - radius) / self.cell).astype(np.int64)
        hi = np.floor((q + radius) / self.cell).astype(np.int64)
        found = []
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    b = self.buckets.get((i, j, k))
                    if b is not None:
                        found.append(b)
        if not found:
            return np.zeros(0, dtype=np.int64)
        cand = np.concatenate(found)
        d2 = np.sum((self.points[cand] - q) ** 2, axis=1)
        return np.sort(cand[d2 <= radius * radius])


class SurfelCloud:
    """The live model: a growable set of weighted, coloured surfels.

    Arrays are kept column-wise. ``provenance`` is optional ground-truth
    bookkeeping (material coordinate per surfel, NaN if unknown).
    """

    def __init__(
        self,
        positions=None,
        normals=None,
        colors=None,
        weights=None,
        provenance=None,
        index_cell: float = 4.0,
    ):
        self._index: VoxelHash | None = None
        self.positions = np.zeros((0, 3)) if positions is None else np.asarray(positions, np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.normals = np.zeros((n, 3)) if normals is None else np.asarray(normals, np.float64).reshape(-1, 3)
        self.colors = np.zeros((n, 3), np.uint8) if colors is None else np.asarray(colors, np.uint8).reshape(-1, 3)
        self.weights = np.ones(n) if weights is None else np.asarray(weights, np.float64).reshape(-1)
        if provenance is None:
            provenance = np.full((n, 3), np.nan)
        provenance = np.asarray(provenance, np.float64)
        self.provenance = provenance.reshape(n, provenance.shape[-1] if provenance.ndim > 1 else 3)
        if not (len(self.normals) == len(self.colors) == len(self.weights) == n):
            raise ValueError("surfel arrays disagree in length")
        self.index_cell = index_cell

    def __len__(self) -> int:
        return len(self._positions)

    @property
    def positions(self) -> np.ndarray:
        return self._positions

    @positions.setter
    def positions(self, value) -> None:
        # Assigning positions is the mutation boundary for the spatial index.
        self._positions = value
        self._index = None

    def copy(self) -> "SurfelCloud":
        return SurfelCloud(
            self.positions.copy(),
            self.normals.copy(),
            self.colors.copy(),
            self.weights.copy(),
            self.provenance.copy(),
            self.index_cell,
        )

    def subset(self, idx) -> "SurfelCloud":
        return SurfelCloud(
            self.positions[idx],
            self.normals[idx],
            self.colors[idx],
            self.weights[idx],
            self.provenance[idx],
            self.index_cell,
        )

    def extend(self, other: "SurfelCloud") -> None:
        self.positions = np.vstack([self.positions, other.positions])
        self.normals = np.vstack([self.normals, other.normals])
        self.colors = np.vstack([self.colors, other.colors])
        self.weights = np.concatenate([self.weights, other.weights])
        self.provenance = np.vstack([self.provenance, other.provenance])
        self.invalidate()

    def invalidate(self) -> None:
        """Mark the spatial index stale; call after mutating positions in place."""
        self._index = None

    @property
    def index(self) -> VoxelHash:
        if self._index is None:
            self._index = VoxelHash(self.positions, self.index_cell)
        return self._index

    def radius_query(self, q, radius: float) -> np.ndarray:
        return self.index.radius_query(q, radius)
