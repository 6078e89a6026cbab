"""Model-to-frame keypoint correspondences and RANSAC rigid initialisation.

The model's visible surfels are splatted into a "model view" (RGB + depth in
the last camera frame) and a dense grid of patches on it is matched against
the new frame. Matching is behind a small provider interface so ground-truth
correspondences from the simulator can stand in for image matching.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import cv2
import numpy as np

from .geometry import lift, project_points
from .types import CameraIntrinsics, DepthFrame, PoseInitFailed, RigidTransform, SurfelCloud

logger = logging.getLogger(__name__)


@dataclass
class CorrespondenceSet:
    src: np.ndarray  # (N, 3) on the model
    dst: np.ndarray  # (N, 3) on the frame
    score: np.ndarray  # (N,)
    inlier_mask: np.ndarray | None = None
    pixels: np.ndarray | None = None  # (N, 2) model-view grid pixel, for overlays

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 3)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 3)
        self.score = np.asarray(self.score, dtype=np.float64).reshape(-1)
        if self.inlier_mask is None:
            self.inlier_mask = np.ones(len(self.src), dtype=bool)
        if not (len(self.src) == len(self.dst) == len(self.score) == len(self.inlier_mask)):
            raise ValueError("correspondence arrays disagree in length")
        if not (np.all(np.isfinite(self.src)) and np.all(np.isfinite(self.dst))):
            raise ValueError("non-finite correspondence")

    def __len__(self) -> int:
        return len(self.src)

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))

    def inliers(self) -> tuple[np.ndarray, np.ndarray]:
        return self.src[self.inlier_mask], self.dst[self.inlier_mask]

    def transformed(self, T: RigidTransform) -> "CorrespondenceSet":
        """Same pairs with the model side moved by ``T``."""
        return CorrespondenceSet(T.apply(self.src), self.dst, self.score, self.inlier_mask.copy(), self.pixels)


@dataclass
class MatcherConfig:
    stride: int = 3
    patch: int = 11
    max_descriptor_dist: float = 0.5  # on 1 - NCC
    ratio_test: float = 0.8
    search_radius: int = 48
    min_texture: float = 2.0  # grey-level std below which a patch is ignored
    refine_affine: bool = True  # ECC affine refinement of the subpixel peak
    refine_max_shift: float = 1.0  # px, refinements moving further are dropped
    cross_check: float = 1.0  # px, max back-match offset; 0 disables the check

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.patch % 2 == 0 or self.patch < 3:
            raise ValueError("patch must be odd and >= 3")


@dataclass
class RansacConfig:
    inlier_threshold: float = 2.0  # mm
    max_iters: int = 1000
    min_inliers: int = 10
    refine_rounds: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")


@dataclass
class ModelView:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W), 0 where no surfel landed
    index: np.ndarray  # (H, W) surfel index, -1 where empty
    intrinsics: CameraIntrinsics

    @property
    def valid(self) -> np.ndarray:
        return self.index >= 0


def render_model_view(cloud: SurfelCloud, intr: CameraIntrinsics, visible: np.ndarray | None = None) -> ModelView:
    """Splat surfels into one pixel each; the nearest wins, ties go to the lower index."""
    H, W = intr.height, intr.width
    rgb = np.zeros((H, W, 3), np.uint8)
    depth = np.zeros((H, W))
    index = np.full((H, W), -1, np.int64)
    idx = np.arange(len(cloud)) if visible is None else np.asarray(visible, dtype=np.int64)
    if len(idx) == 0:
        return ModelView(rgb, depth, index, intr)
    pts = cloud.positions[idx]
    _, pix, ok = project_points(intr, pts)
    idx, pix, z = idx[ok], pix[ok], pts[ok, 2]
    lin = pix[:, 1] * W + pix[:, 0]
    order = np.lexsort((idx, z, lin))
    lin, idx, z = lin[order], idx[order], z[order]
    first = np.ones(len(lin), dtype=bool)
    first[1:] = lin[1:] != lin[:-1]
    lin, idx, z = lin[first], idx[first], z[first]
    depth.reshape(-1)[lin] = z
    index.reshape(-1)[lin] = idx
    rgb.reshape(-1, 3)[lin] = cloud.colors[idx]
    return ModelView(rgb, depth, index, intr)


def to_gray(rgb: np.ndarray) -> np.ndarray:
    return cv2.cvtColor(np.ascontiguousarray(rgb), cv2.COLOR_RGB2GRAY).astype(np.float32)


def fill_holes(gray: np.ndarray, valid: np.ndarray, passes: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Fill invalid pixels with the mean of valid 3x3 neighbours, ``passes`` times."""
    g = np.where(valid, gray, 0.0).astype(np.float32)
    v = valid.astype(np.float32)
    for _ in range(passes):
        s = cv2.boxFilter(g * v, -1, (3, 3), normalize=False, borderType=cv2.BORDER_CONSTANT)
        c = cv2.boxFilter(v, -1, (3, 3), normalize=False, borderType=cv2.BORDER_CONSTANT)
        newly = (v == 0) & (c > 0)
        g = np.where(newly, s / np.maximum(c, 1), g)
        v = np.where(newly, 1.0, v).astype(np.float32)
    return g, v > 0


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalised cross-correlation of two equal-size patches."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def _subpixel(scores: np.ndarray, y: int, x: int) -> tuple[float, float]:
    dy = dx = 0.0
    if 0 < x < scores.shape[1] - 1:
        l, c, r = scores[y, x - 1], scores[y, x], scores[y, x + 1]
        den = l - 2 * c + r
        if den < 0:
            dx = float(np.clip(0.5 * (l - r) / den, -0.5, 0.5))
    if 0 < y < scores.shape[0] - 1:
        l, c, r = scores[y - 1, x], scores[y, x], scores[y + 1, x]
        den = l - 2 * c + r
        if den < 0:
            dy = float(np.clip(0.5 * (l - r) / den, -0.5, 0.5))
    return dx, dy


def _back_matches(mgray, fgray, x, y, fx, fy, cfg: MatcherConfig) -> bool:
    """Does the frame patch at ``(fx, fy)`` match back to ``(x, y)`` in the model view?"""
    h = cfg.patch // 2
    H, W = fgray.shape
    if not (h <= fx < W - h and h <= fy < H - h):
        return False
    tpl = fgray[fy - h : fy + h + 1, fx - h : fx + h + 1]
    R = cfg.search_radius
    y0, y1 = max(0, fy - R - h), min(H, fy + R + h + 1)
    x0, x1 = max(0, fx - R - h), min(W, fx + R + h + 1)
    sc = cv2.matchTemplate(mgray[y0:y1, x0:x1], tpl, cv2.TM_CCOEFF_NORMED)
    sc = np.nan_to_num(sc, nan=-1.0, posinf=-1.0, neginf=-1.0)
    by, bx = np.unravel_index(int(np.argmax(sc)), sc.shape)
    return np.hypot(x0 + bx + h - x, y0 + by + h - y) <= cfg.cross_check


_ECC_CRITERIA = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 200, 1e-8)
# float32 correlation scores a verbatim patch at about 1 - 1e-5
_EXACT_SCORE = 1.0 - 1e-4


def _refine_ecc(tpl: np.ndarray, image: np.ndarray, u: float, v: float, max_shift: float) -> tuple[float, float]:
    """Affine ECC alignment of ``tpl`` centred at ``(u, v)``; falls back to ``(u, v)``."""
    h = tpl.shape[0] // 2
    warp = np.array([[1, 0, u - h], [0, 1, v - h]], np.float32)
    try:
        _, warp = cv2.findTransformECC(tpl, image, warp, cv2.MOTION_AFFINE, _ECC_CRITERIA, None, 1)
    except cv2.error:
        return u, v
    ru, rv = warp @ np.array([h, h, 1.0], np.float32)
    if not np.isfinite(ru + rv) or np.hypot(ru - u, rv - v) > max_shift:
        return u, v
    return float(ru), float(rv)


def _depth_at(depth: np.ndarray, u: float, v: float) -> float:
    """Bilinear depth when all four neighbours are valid, else nearest; 0 if invalid."""
    H, W = depth.shape
    x0, y0 = int(np.floor(u)), int(np.floor(v))
    if 0 <= x0 and x0 + 1 < W and 0 <= y0 and y0 + 1 < H:
        quad = depth[y0 : y0 + 2, x0 : x0 + 2]
        if np.all(quad > 0):
            fx, fy = u - x0, v - y0
            top = quad[0, 0] * (1 - fx) + quad[0, 1] * fx
            bot = quad[1, 0] * (1 - fx) + quad[1, 1] * fx
            return float(top * (1 - fy) + bot * fy)
    xi, yi = int(round(u)), int(round(v))
    if 0 <= xi < W and 0 <= yi < H:
        return float(depth[yi, xi])
    return 0.0


def match_dense(modelview: ModelView, frame: DepthFrame, cfg: MatcherConfig | None = None) -> CorrespondenceSet:
    """Grid-sampled NCC patch matching from the model view into the frame."""
    cfg = cfg or MatcherConfig()
    intr = frame.intrinsics
    H, W = intr.height, intr.width
    h = cfg.patch // 2
    mgray, mvalid = fill_holes(to_gray(modelview.rgb), modelview.valid)
    fgray = to_gray(frame.rgb)
    src, dst, score, pixels = [], [], [], []
    R = cfg.search_radius
    excl = h  # second-best search excludes the peak's own neighbourhood
    for y in range(h, H - h, cfg.stride):
        for x in range(h, W - h, cfg.stride):
            if modelview.depth[y, x] <= 0:
                continue
            if not mvalid[y - h : y + h + 1, x - h : x + h + 1].all():
                continue
            tpl = mgray[y - h : y + h + 1, x - h : x + h + 1]
            if tpl.std() < cfg.min_texture:
                continue
            y0, y1 = max(0, y - R - h), min(H, y + R + h + 1)
            x0, x1 = max(0, x - R - h), min(W, x + R + h + 1)
            win = fgray[y0:y1, x0:x1]
            if win.shape[0] < cfg.patch or win.shape[1] < cfg.patch:
                continue
            sc = cv2.matchTemplate(win, tpl, cv2.TM_CCOEFF_NORMED)
            sc = np.nan_to_num(sc, nan=-1.0, posinf=-1.0, neginf=-1.0)
            by, bx = np.unravel_index(int(np.argmax(sc)), sc.shape)
            best = float(sc[by, bx])
            masked = sc.copy()
            masked[max(0, by - excl) : by + excl + 1, max(0, bx - excl) : bx + excl + 1] = -1.0
            second = float(masked.max()) if masked.size else -1.0
            d_best, d_second = 1.0 - best, 1.0 - second
            if d_best > cfg.max_descriptor_dist or d_best > cfg.ratio_test * d_second:
                continue
            # a perfect peak is already exact; refining it only adds asymmetry noise
            exact = best >= _EXACT_SCORE
            sx, sy = (0.0, 0.0) if exact else _subpixel(sc, by, bx)
            fu, fv = x0 + bx + h + sx, y0 + by + h + sy
            if cfg.cross_check > 0 and not _back_matches(mgray, fgray, x, y, x0 + bx + h, y0 + by + h, cfg):
                continue
            if cfg.refine_affine and not exact:
                fu, fv = _refine_ecc(np.ascontiguousarray(tpl), fgray, fu, fv, cfg.refine_max_shift)
            d = _depth_at(frame.depth, fu, fv)
            if d <= 0:
                continue
            src.append(lift(intr, np.float64(x), np.float64(y), modelview.depth[y, x]))
            dst.append(lift(intr, np.float64(fu), np.float64(fv), np.float64(d)))
            score.append(best)
            pixels.append((x, y))
    if not src:
        return CorrespondenceSet.empty()
    return CorrespondenceSet(np.array(src), np.array(dst), np.array(score), pixels=np.array(pixels))


# -- rigid fitting ------------------------------------------------------------


def procrustes(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation with ``dst ≈ R src + t`` (Kabsch)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    Hm = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(Hm)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


def _batched_procrustes(S: np.ndarray, D: np.ndarray):
    cs, cd = S.mean(axis=1), D.mean(axis=1)
    Hm = np.einsum("bni,bnj->bij", S - cs[:, None], D - cd[:, None])
    U, _, Vt = np.linalg.svd(Hm)
    V = np.transpose(Vt, (0, 2, 1))
    Ut = np.transpose(U, (0, 2, 1))
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    Dg = np.tile(np.eye(3), (len(S), 1, 1))
    Dg[:, 2, 2] = d
    R = V @ Dg @ Ut
    t = cd - np.einsum("bij,bj->bi", R, cs)
    return R, t


def _orthonormalise(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Rn = U @ Vt
    if np.linalg.det(Rn) < 0:
        U[:, -1] *= -1
        Rn = U @ Vt
    return Rn


def ransac_rigid(corrs: CorrespondenceSet, cfg: RansacConfig | None = None) -> tuple[RigidTransform, np.ndarray]:
    """Robust rigid fit from 3-point samples, then inlier refits.

    Deterministic for a given ``cfg.seed``.
    """
    cfg = cfg or RansacConfig()
    n = len(corrs)
    if n < 3:
        raise PoseInitFailed(f"need at least 3 correspondences, have {n}")
    src, dst = corrs.src, corrs.dst
    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.inlier_threshold**2

    samples = np.stack([rng.choice(n, size=3, replace=False) for _ in range(cfg.max_iters)])
    S, D = src[samples], dst[samples]
    # degenerate (near-collinear) samples cannot fix a rotation
    area = np.linalg.norm(np.cross(S[:, 1] - S[:, 0], S[:, 2] - S[:, 0]), axis=1)
    good = area > 1e-9
    best_count, best_cost = -1, np.inf
    best_R, best_t = np.eye(3), np.zeros(3)
    if good.any():
        Rs, ts = _batched_procrustes(S[good], D[good])
        chunk = 256
        for b0 in range(0, len(Rs), chunk):
            Rb, tb = Rs[b0 : b0 + chunk], ts[b0 : b0 + chunk]
            pred = np.einsum("bij,nj->bni", Rb, src) + tb[:, None, :]
            e2 = np.sum((pred - dst[None]) ** 2, axis=2)
            inl = e2 < thr2
            counts = inl.sum(axis=1)
            costs = np.where(inl, e2, thr2).sum(axis=1)
            for i in range(len(Rb)):
                if counts[i] > best_count or (counts[i] == best_count and costs[i] < best_cost):
                    best_count, best_cost = int(counts[i]), float(costs[i])
                    best_R, best_t = Rb[i], tb[i]
    if best_count < 0:
        raise PoseInitFailed("all minimal samples were degenerate")

    def classify(R, t):
        e2 = np.sum((src @ R.T + t - dst) ** 2, axis=1)
        return e2 < thr2

    mask = classify(best_R, best_t)
    R, t = best_R, best_t
    for _ in range(cfg.refine_rounds):
        if mask.sum() < 3:
            break
        R2, t2 = procrustes(src[mask], dst[mask])
        mask2 = classify(R2, t2)
        if mask2.sum() < mask.sum():
            # keep the larger set but report its least-squares pose, not the 3-point one
            R, t = R2, t2
            break
        R, t, mask = R2, t2, mask2
    if mask.sum() < cfg.min_inliers:
        raise PoseInitFailed(f"only {int(mask.sum())} inliers (< {cfg.min_inliers})")
    return RigidTransform(_orthonormalise(R), t), mask


# -- providers ----------------------------------------------------------------


class CorrespondenceProvider(Protocol):
    def find(self, model: SurfelCloud, visible: np.ndarray, modelview: ModelView, frame: DepthFrame) -> CorrespondenceSet:
        ...


@dataclass
class NCCProvider:
    config: MatcherConfig = field(default_factory=MatcherConfig)

    def find(self, model, visible, modelview, frame) -> CorrespondenceSet:
        return match_dense(modelview, frame, self.config)


class NullProvider:
    """No keypoints; the warp is driven by the dense term alone."""

    def find(self, model, visible, modelview, frame) -> CorrespondenceSet:
        return CorrespondenceSet.empty()


def write_overlay_ppm(path, modelview: ModelView, frame: DepthFrame, corrs: CorrespondenceSet) -> None:
    """Side-by-side model view | frame with inlier matches drawn, for debugging."""
    from .io import write_ppm

    W = frame.intrinsics.width
    canvas = np.concatenate([modelview.rgb, frame.rgb], axis=1).copy()
    uv, _, ok = project_points(frame.intrinsics, corrs.dst)
    for i in range(len(corrs)):
        if corrs.pixels is None or not ok[i]:
            continue
        a = (int(corrs.pixels[i, 0]), int(corrs.pixels[i, 1]))
        b = (int(round(uv[i, 0])) + W, int(round(uv[i, 1])))
        color = (0, 255, 0) if corrs.inlier_mask[i] else (255, 0, 0)
        cv2.line(canvas, a, b, color, 1)
    write_ppm(path, canvas)
