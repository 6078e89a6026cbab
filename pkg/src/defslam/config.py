"""Pipeline configuration and its flat JSON key mapping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .correspond import MatcherConfig, RansacConfig
from .energy import EnergyWeights, VisibilityParams
from .fusion import FusionParams
from .solver import SolverConfig


@dataclass
class PipelineConfig:
    node_spacing: float = 4.0  # mm
    bind_k: int = 4
    graph_neighbors: int = 6
    normal_k: int = 8
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    visibility: VisibilityParams = field(default_factory=VisibilityParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    fusion: FusionParams = field(default_factory=FusionParams)
    frame_skip_error_threshold: float = 2.0  # mm mean point-to-plane residual
    depth_smooth_px: float = 1.5  # bilateral spatial sigma, 0 disables
    depth_smooth_mm: float = 1.0  # bilateral range sigma
    rigid_init: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.frame_skip_error_threshold <= 0:
            raise ValueError("frame_skip_error_threshold must be positive")
        # the fusion weight normaliser is the node grid size
        self.fusion.eps = self.node_spacing
        self.ransac.seed = self.seed


# flat key -> (section or None, attribute)
KEYS = {
    "node_spacing_mm": (None, "node_spacing"),
    "bind_k": (None, "bind_k"),
    "graph_neighbors": (None, "graph_neighbors"),
    "normal_k": (None, "normal_k"),
    "w_rot": ("weights", "w_rot"),
    "w_reg": ("weights", "w_reg"),
    "w_data": ("weights", "w_data"),
    "w_corr": ("weights", "w_corr"),
    "eps_d_mm": ("visibility", "eps_d"),
    "eps_n_deg": ("visibility", "eps_n"),
    "df_cell_mm": ("visibility", "df_cell"),
    "use_distance_field": ("visibility", "use_distance_field"),
    "mu_init": ("solver", "mu_init"),
    "mu_up": ("solver", "mu_up"),
    "mu_down": ("solver", "mu_down"),
    "max_iters": ("solver", "max_iters"),
    "rel_tol": ("solver", "rel_tol"),
    "step_tol": ("solver", "step_tol"),
    "stride": ("matcher", "stride"),
    "patch": ("matcher", "patch"),
    "max_descriptor_dist": ("matcher", "max_descriptor_dist"),
    "ratio_test": ("matcher", "ratio_test"),
    "search_radius": ("matcher", "search_radius"),
    "min_texture": ("matcher", "min_texture"),
    "refine_affine": ("matcher", "refine_affine"),
    "refine_max_shift_px": ("matcher", "refine_max_shift"),
    "cross_check_px": ("matcher", "cross_check"),
    "inlier_threshold_mm": ("ransac", "inlier_threshold"),
    "ransac_iters": ("ransac", "max_iters"),
    "min_inliers": ("ransac", "min_inliers"),
    "refine_rounds": ("ransac", "refine_rounds"),
    "tau_mm": ("fusion", "tau"),
    "omega_max": ("fusion", "omega_max"),
    "insert_cell_mm": ("fusion", "insert_cell"),
    "frame_skip_error_threshold_mm": (None, "frame_skip_error_threshold"),
    "depth_smooth_px": (None, "depth_smooth_px"),
    "depth_smooth_mm": (None, "depth_smooth_mm"),
    "rigid_init": (None, "rigid_init"),
    "seed": (None, "seed"),
}


def config_from_dict(d: dict) -> PipelineConfig:
    unknown = set(d) - set(KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    top = {}
    sections: dict[str, dict] = {}
    for key, value in d.items():
        section, attr = KEYS[key]
        if section is None:
            top[attr] = value
        else:
            sections.setdefault(section, {})[attr] = value
    types = {f.name: f.default_factory for f in fields(PipelineConfig) if f.name in {s for s, _ in KEYS.values()}}
    for name, kw in sections.items():
        top[name] = types[name](**kw)
    return PipelineConfig(**top)


def config_to_dict(cfg: PipelineConfig) -> dict:
    out = {}
    for key, (section, attr) in KEYS.items():
        obj = cfg if section is None else getattr(cfg, section)
        out[key] = getattr(obj, attr)
    return out


def load_config(path) -> PipelineConfig:
    return config_from_dict(json.loads(Path(path).read_text()))
