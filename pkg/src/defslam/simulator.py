"""Synthetic deforming surfaces with ground truth.

A rest surface is triangulated on a regular material grid (or loaded from a
PLY mesh). Scripted control-vertex displacements accumulate from frame to
frame and spread over the surface with a compact smooth falloff of radius
three control spacings, so every frame's shape is a smooth blend of
translations around control points. Frames are rendered through the pinhole
model with a z-buffer rasteriser that interpolates rest coordinates
perspective-correctly; those per-pixel rest coordinates are the dense
ground-truth correspondence and texture lookup.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .types import CameraIntrinsics, DepthFrame, EmptyRender, RigidTransform, SurfelCloud

SURFACES = ("plane", "sinusoid", "cylinder", "mesh")
TEXTURES = ("checker", "noise", "image")


@dataclass
class SceneSpec:
    surface: str = "sinusoid"
    extent: float = 60.0  # mm, side of the square material patch
    distance: float = 55.0  # mm, camera to surface centre
    resolution: float = 0.5  # mm, mesh grid spacing
    amplitude: float = 1.5  # mm, sinusoid sheet relief
    wavelength: float = 30.0  # mm
    cylinder_radius: float = 40.0  # mm
    mesh_path: str | None = None
    texture: str = "noise"
    texture_scale: float = 1.5  # mm, checker square / finest noise cell
    texture_path: str | None = None
    n_frames: int = 1
    control_spacing: float = 8.0  # mm
    # explicit (frame, control id, (dx, dy, dz)) entries; applied on top of the
    # previous frame's state
    deformation: list = field(default_factory=list)
    random_deformation: tuple | None = None  # (min, max) mm per frame, one random control
    camera_poses: list | None = None  # camera-to-world RigidTransform per frame
    noise_sigma: float = 0.3  # mm, additive Gaussian depth noise
    seed: int = 0
    fx: float = 200.0
    fy: float = 200.0
    width: int = 160
    height: int = 120

    def __post_init__(self):
        if self.surface not in SURFACES:
            raise ValueError(f"surface must be one of {SURFACES}")
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        if self.extent <= 0 or self.resolution <= 0 or self.control_spacing <= 0:
            raise ValueError("extent, resolution and control_spacing must be positive")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        for entry in self.deformation:
            if not np.all(np.isfinite(np.asarray(entry[2], dtype=float))):
                raise ValueError("non-finite scripted displacement")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.fx, self.fy, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.width, self.height
        )

    def to_json(self) -> str:
        d = asdict(self)
        if self.camera_poses is not None:
            d["camera_poses"] = [
                {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()} for p in self.camera_poses
            ]
        d["deformation"] = [[int(f), int(c), [float(x) for x in v]] for f, c, v in self.deformation]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        poses = d.pop("camera_poses", None)
        if poses is not None:
            out = []
            for p in poses:
                if "rotvec_deg" in p:
                    R = Rotation.from_rotvec(np.radians(p["rotvec_deg"])).as_matrix()
                else:
                    R = np.asarray(p.get("rotation", np.eye(3)))
                out.append(RigidTransform(R, p.get("translation", [0, 0, 0])))
            d["camera_poses"] = out
        if d.get("random_deformation") is not None:
            d["random_deformation"] = tuple(d["random_deformation"])
        d["deformation"] = [tuple(e) for e in d.get("deformation", [])]
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def orbit_pose(rotvec_deg, translation, center) -> RigidTransform:
    """Camera pose that makes the scene appear rotated about ``center`` and shifted.

    The scene motion is ``X -> R (X - c) + c + T``; the camera pose returned is
    its inverse, so rendering from it shows the moved scene.
    """
    R = Rotation.from_rotvec(np.radians(rotvec_deg)).as_matrix()
    c = np.asarray(center, dtype=np.float64)
    motion = RigidTransform(R, c + np.asarray(translation, dtype=np.float64) - R @ c)
    return motion.inverse()


# -- rest surface -------------------------------------------------------------


def _grid_mesh(spec: SceneSpec):
    n = int(round(spec.extent / spec.resolution)) + 1
    s = np.linspace(-spec.extent / 2, spec.extent / 2, n)
    U, V = np.meshgrid(s, s)  # V rows, U columns
    z0 = spec.distance
    if spec.surface == "plane":
        P = np.stack([U, V, np.full_like(U, z0)], axis=-1)
    elif spec.surface == "sinusoid":
        k = 2 * np.pi / spec.wavelength
        h = spec.amplitude * np.sin(k * U) * np.cos(k * V)
        P = np.stack([U, V, z0 - h], axis=-1)
    else:  # cylinder, axis along y, bulging toward the camera
        R = spec.cylinder_radius
        ang = np.clip(U / R, -0.45 * np.pi, 0.45 * np.pi)
        P = np.stack([R * np.sin(ang), V, z0 + R - R * np.cos(ang)], axis=-1)
    verts = P.reshape(-1, 3)
    idx = np.arange(n * n).reshape(n, n)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    # control vertices on a coarser sub-grid of the material grid
    step = max(1, int(round(spec.control_spacing / spec.resolution)))
    ctrl = idx[step // 2 :: step, step // 2 :: step].ravel()
    return verts, faces, ctrl


def rest_mesh(spec: SceneSpec):
    """``(vertices, faces, control_vertex_ids)`` of the undeformed surface."""
    if spec.surface != "mesh":
        return _grid_mesh(spec)
    from .io import read_ply

    cloud, faces = read_ply(spec.mesh_path, with_faces=True)
    if faces is None or len(faces) == 0:
        raise ValueError("mesh surface needs a PLY with faces")
    verts = cloud.positions
    # greedy control selection: vertices at least control_spacing apart
    keys = np.floor(verts / spec.control_spacing).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return verts, faces.astype(np.int64), np.sort(first)


# -- texture ------------------------------------------------------------------


def _value_noise(xy: np.ndarray, cell: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(1024)
    vals = rng.random(1024)
    g = xy / cell
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    f = f * f * (3 - 2 * f)

    def lattice(ix, iy):
        return vals[perm[(perm[ix % 1024] + iy) % 1024]]

    x0, y0 = i0[:, 0], i0[:, 1]
    v00, v10 = lattice(x0, y0), lattice(x0 + 1, y0)
    v01, v11 = lattice(x0, y0 + 1), lattice(x0 + 1, y0 + 1)
    top = v00 * (1 - f[:, 0]) + v10 * f[:, 0]
    bot = v01 * (1 - f[:, 0]) + v11 * f[:, 0]
    return top * (1 - f[:, 1]) + bot * f[:, 1]


def texture_color(spec: SceneSpec, rest: np.ndarray, image: np.ndarray | None = None) -> np.ndarray:
    """8-bit colours as a function of rest coordinates ``(N, 3)``."""
    xy = rest[:, :2]
    if spec.texture == "checker":
        q = (np.floor(xy[:, 0] / spec.texture_scale) + np.floor(xy[:, 1] / spec.texture_scale)) % 2
        g = 60 + 150 * q
    elif spec.texture == "noise":
        g = np.zeros(len(xy))
        amp, total = 1.0, 0.0
        for octave in range(3):
            g += amp * _value_noise(xy, spec.texture_scale * 4 / 2**octave, spec.seed + 17 * octave)
            total += amp
            amp *= 0.6
        g = 40 + 180 * g / total
    else:
        h, w, _ = image.shape
        col = np.clip(((xy[:, 0] / spec.extent + 0.5) * (w - 1)).round().astype(int), 0, w - 1)
        row = np.clip(((xy[:, 1] / spec.extent + 0.5) * (h - 1)).round().astype(int), 0, h - 1)
        return image[row, col].copy()
    # tissue-like tint
    rgb = np.stack([g * 1.0, g * 0.55 + 20, g * 0.5 + 15], axis=1)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


# -- rasteriser ---------------------------------------------------------------


def rasterize(intr: CameraIntrinsics, verts: np.ndarray, faces: np.ndarray, attrs: np.ndarray):
    """Z-buffer triangles in camera coordinates.

    Returns ``(depth, attr_image, hit)``; depth is 0 and attributes NaN where no
    triangle covers the pixel centre. Depth and attributes are interpolated
    perspective-correctly, so planar triangles reproduce exact plane depth.
    """
    H, W = intr.height, intr.width
    depth = np.zeros((H, W))
    out_attr = np.full((H, W, attrs.shape[1]), np.nan)
    z = verts[:, 2]
    front = z > 1e-9
    F = faces[np.all(front[faces], axis=1)]
    if len(F) == 0:
        return depth, out_attr, depth > 0
    zs = np.where(front, z, 1.0)
    pu = intr.fx * verts[:, 0] / zs + intr.cx
    pv = intr.fy * verts[:, 1] / zs + intr.cy
    U, V, Z = pu[F], pv[F], z[F]  # (T, 3)
    x0 = np.ceil(U.min(axis=1)).astype(np.int64)
    x1 = np.floor(U.max(axis=1)).astype(np.int64)
    y0 = np.ceil(V.min(axis=1)).astype(np.int64)
    y1 = np.floor(V.max(axis=1)).astype(np.int64)
    onscreen = (x1 >= 0) & (x0 < W) & (y1 >= 0) & (y0 < H) & (x1 >= x0) & (y1 >= y0)
    F, U, V, Z = F[onscreen], U[onscreen], V[onscreen], Z[onscreen]
    x0, x1, y0, y1 = x0[onscreen], x1[onscreen], y0[onscreen], y1[onscreen]
    area = (U[:, 1] - U[:, 0]) * (V[:, 2] - V[:, 0]) - (U[:, 2] - U[:, 0]) * (V[:, 1] - V[:, 0])
    ok = np.abs(area) > 1e-12
    F, U, V, Z, area = F[ok], U[ok], V[ok], Z[ok], area[ok]
    x0, x1, y0, y1 = x0[ok], x1[ok], y0[ok], y1[ok]
    A = attrs[F]  # (T, 3, k)
    bw, bh = int((x1 - x0).max(initial=0)) + 1, int((y1 - y0).max(initial=0)) + 1
    lins, zs_, ats = [], [], []
    for dy in range(bh):
        for dx in range(bw):
            sel = (x0 + dx <= x1) & (y0 + dy <= y1)
            if not sel.any():
                continue
            px = (x0[sel] + dx).astype(np.float64)
            py = (y0[sel] + dy).astype(np.float64)
            u, v, zz, ar = U[sel], V[sel], Z[sel], area[sel]
            l0 = ((u[:, 1] - px) * (v[:, 2] - py) - (u[:, 2] - px) * (v[:, 1] - py)) / ar
            l1 = ((u[:, 2] - px) * (v[:, 0] - py) - (u[:, 0] - px) * (v[:, 2] - py)) / ar
            l2 = 1.0 - l0 - l1
            lam = np.stack([l0, l1, l2], axis=1)
            inside = np.all(lam >= -1e-9, axis=1)
            inside &= (px >= 0) & (px < W) & (py >= 0) & (py < H)
            if not inside.any():
                continue
            lam = lam[inside]
            inv = lam / zz[inside]
            invz = inv.sum(axis=1)
            zpix = 1.0 / invz
            at = np.einsum("tv,tvk->tk", inv, A[sel][inside]) / invz[:, None]
            lins.append((py[inside] * W + px[inside]).astype(np.int64))
            zs_.append(zpix)
            ats.append(at)
    if not lins:
        return depth, out_attr, depth > 0
    lin = np.concatenate(lins)
    zz = np.concatenate(zs_)
    at = np.concatenate(ats)
    order = np.lexsort((zz, lin))
    lin, zz, at = lin[order], zz[order], at[order]
    first = np.ones(len(lin), dtype=bool)
    first[1:] = lin[1:] != lin[:-1]
    depth.reshape(-1)[lin[first]] = zz[first]
    out_attr.reshape(-1, attrs.shape[1])[lin[first]] = at[first]
    return depth, out_attr, depth > 0


# -- ground truth ---------------------------------------------------------------


def falloff(s: np.ndarray) -> np.ndarray:
    """Compact smooth bump: ``(1 - s^2)^3`` on ``[0, 1)``, zero beyond."""
    s = np.asarray(s, dtype=np.float64)
    return np.where(s < 1.0, (1.0 - np.minimum(s, 1.0) ** 2) ** 3, 0.0)


@dataclass
class GroundTruth:
    rest_vertices: np.ndarray  # (V, 3) world, frame-0 shape
    faces: np.ndarray  # (F, 3)
    control_ids: np.ndarray  # (C,)
    control_offsets: np.ndarray  # (n_frames, C, 3) cumulative displacements
    radius: float
    poses: list  # camera-to-world RigidTransform per frame
    intrinsics: CameraIntrinsics

    @property
    def n_frames(self) -> int:
        return len(self.control_offsets)

    @property
    def control_rest(self) -> np.ndarray:
        return self.rest_vertices[self.control_ids]

    def displacement(self, rest_pts: np.ndarray, f: int) -> np.ndarray:
        rest_pts = np.asarray(rest_pts, dtype=np.float64).reshape(-1, 3)
        d = np.linalg.norm(rest_pts[:, None, :] - self.control_rest[None], axis=2)
        return falloff(d / self.radius) @ self.control_offsets[f]

    def world_positions(self, rest_pts: np.ndarray, f: int) -> np.ndarray:
        rest_pts = np.asarray(rest_pts, dtype=np.float64).reshape(-1, 3)
        return rest_pts + self.displacement(rest_pts, f)

    def camera_positions(self, rest_pts: np.ndarray, f: int) -> np.ndarray:
        """Where material points sit at frame ``f`` in that frame's camera coordinates."""
        return self.poses[f].inverse().apply(self.world_positions(rest_pts, f))

    def vertices(self, f: int) -> np.ndarray:
        return self.world_positions(self.rest_vertices, f)

    def camera_vertices(self, f: int) -> np.ndarray:
        return self.poses[f].inverse().apply(self.vertices(f))


def deformation_script(spec: SceneSpec, n_controls: int) -> list:
    """Explicit script plus, if requested, one random control push per frame."""
    script = [(int(f), int(c), np.asarray(d, dtype=np.float64)) for f, c, d in spec.deformation]
    if spec.random_deformation is not None:
        lo, hi = spec.random_deformation
        rng = np.random.default_rng([spec.seed, 7919])
        for f in range(1, spec.n_frames):
            c = int(rng.integers(n_controls))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            script.append((f, c, direction * rng.uniform(lo, hi)))
    return script


def generate(spec: SceneSpec) -> tuple[list[DepthFrame], GroundTruth]:
    """Render every frame of the scene and return the frames with their ground truth."""
    verts, faces, ctrl = rest_mesh(spec)
    C = len(ctrl)
    offsets = np.zeros((spec.n_frames, C, 3))
    script = deformation_script(spec, C)
    for f in range(spec.n_frames):
        if f > 0:
            offsets[f] = offsets[f - 1]
        for sf, c, d in script:
            if sf == f:
                if not 0 <= c < C:
                    raise ValueError(f"control id {c} out of range (0..{C - 1})")
                offsets[f, c] += d
    poses = list(spec.camera_poses) if spec.camera_poses is not None else [RigidTransform()] * spec.n_frames
    if len(poses) < spec.n_frames:
        raise ValueError("camera_poses shorter than n_frames")
    intr = spec.intrinsics
    truth = GroundTruth(verts, faces, ctrl, offsets, 3.0 * spec.control_spacing, poses[: spec.n_frames], intr)
    image = None
    if spec.texture == "image":
        from .io import read_ppm

        image = read_ppm(spec.texture_path)
    frames = []
    for f in range(spec.n_frames):
        cam = truth.camera_vertices(f)
        depth, rest_img, hit = rasterize(intr, cam, faces, verts)
        if not hit.any():
            raise EmptyRender(f"frame {f}: camera does not see the surface")
        rgb = np.zeros((intr.height, intr.width, 3), np.uint8)
        rgb[hit] = texture_color(spec, rest_img[hit], image)
        if spec.noise_sigma > 0:
            rng = np.random.default_rng([spec.seed, f, 104729])
            noise = rng.normal(0.0, spec.noise_sigma, size=depth.shape)
            depth = np.where(hit, np.maximum(depth + noise, 1e-3), 0.0)
        frames.append(DepthFrame(depth, rgb, intr, f, material=rest_img))
    return frames, truth


# -- evaluation -----------------------------------------------------------------


def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point on triangle ``abc`` to ``p``, row-wise (Ericson's region test)."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = np.sum(ab * ap, -1), np.sum(ac * ap, -1)
    bp = p - b
    d3, d4 = np.sum(ab * bp, -1), np.sum(ac * bp, -1)
    cp = p - c
    d5, d6 = np.sum(ab * cp, -1), np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    out = np.empty_like(p)
    done = np.zeros(p.shape[:-1], dtype=bool)

    def put(mask, val):
        nonlocal done
        m = mask & ~done
        out[m] = val[m]
        done |= m

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[..., None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[..., None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[..., None] * (c - b))
        den = 1.0 / (va + vb + vc)
        v, w = vb * den, vc * den
        put(np.ones_like(done), a + v[..., None] * ab + w[..., None] * ac)
    return out


def surface_distance(points: np.ndarray, verts: np.ndarray, faces: np.ndarray, k: int = 16) -> np.ndarray:
    """Distance from each point to the triangle mesh (exact over the k nearest faces)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cent = verts[faces].mean(axis=1)
    k = min(k, len(faces))
    _, cand = cKDTree(cent).query(pts, k=k)
    cand = np.asarray(cand).reshape(len(pts), k)
    tri = verts[faces[cand]]  # (N, k, 3, 3)
    P = np.broadcast_to(pts[:, None, :], (len(pts), k, 3))
    q = closest_points_on_triangles(P, tri[:, :, 0], tri[:, :, 1], tri[:, :, 2])
    return np.sqrt(np.min(np.sum((q - P) ** 2, axis=-1), axis=1))


def evaluate(model: SurfelCloud, truth: GroundTruth, frame_index: int) -> dict:
    """Surface distance metrics of a model expressed in camera coordinates of ``frame_index``.

    If surfels carry provenance (rest coordinates), tracked-point errors against
    their true positions are included.
    """
    if len(model) == 0:
        raise ValueError("model is empty")
    d = surface_distance(model.positions, truth.camera_vertices(frame_index), truth.faces)
    metrics = {
        "frame": int(frame_index),
        "n": len(model),
        "mean": float(d.mean()),
        "median": float(np.median(d)),
        "max": float(d.max()),
    }
    prov = model.provenance
    tracked = np.all(np.isfinite(prov), axis=1) if prov.shape[1] == 3 else np.zeros(len(model), bool)
    if tracked.any():
        true = truth.camera_positions(prov[tracked], frame_index)
        e = np.linalg.norm(model.positions[tracked] - true, axis=1)
        metrics.update(
            n_tracked=int(tracked.sum()),
            tracked_mean=float(e.mean()),
            tracked_median=float(np.median(e)),
            tracked_max=float(e.max()),
        )
    return metrics


class GroundTruthProvider:
    """Exact model-to-frame correspondences from surfel provenance.

    Visible surfels rendered at the model-view grid locations are paired with
    the true position of their material point in the new frame, as long as
    that point is seen by the frame (not occluded, inside the image).
    """

    def __init__(self, truth: GroundTruth, stride: int = 3, occlusion_tol: float = 0.5):
        self.truth = truth
        self.stride = stride
        self.occlusion_tol = occlusion_tol

    def find(self, model, visible, modelview, frame):
        from .correspond import CorrespondenceSet
        from .geometry import project_points

        idx = modelview.index[:: self.stride, :: self.stride].ravel()
        idx = np.unique(idx[idx >= 0])
        prov = model.provenance[idx]
        good = np.all(np.isfinite(prov), axis=1)
        idx, prov = idx[good], prov[good]
        if len(idx) == 0:
            return CorrespondenceSet.empty()
        dst = self.truth.camera_positions(prov, frame.frame_index)
        _, pix, ok = project_points(frame.intrinsics, dst)
        d = np.zeros(len(dst))
        d[ok] = frame.depth[pix[ok, 1], pix[ok, 0]]
        ok &= (d > 0) & (np.abs(d - dst[:, 2]) < self.occlusion_tol)
        return CorrespondenceSet(model.positions[idx[ok]], dst[ok], np.ones(int(ok.sum())))


def truth_surfels(truth: GroundTruth, frame_index: int) -> SurfelCloud:
    """The true surface at a frame as a (vertex-only) cloud in camera coordinates."""
    v = truth.camera_vertices(frame_index)
    return SurfelCloud(v, np.zeros_like(v), np.zeros((len(v), 3), np.uint8), np.ones(len(v)))
