"""Deformable surface reconstruction: embedded-deformation tracking plus surfel fusion."""

from .config import PipelineConfig, load_config
from .correspond import CorrespondenceSet, NCCProvider, NullProvider, match_dense, ransac_rigid
from .energy import EnergyWeights, VisibilityParams, WarpProblem
from .fusion import FusionParams, fuse_depth, insert_new_points
from .pipeline import ReconstructionState, process_frame, run_sequence
from .simulator import GroundTruthProvider, SceneSpec, evaluate, generate
from .solver import SolverConfig, lm_solve
from .types import (
    CameraIntrinsics,
    DefSlamError,
    DepthFrame,
    EmptyModel,
    EmptyRender,
    InsufficientNodes,
    NoConstraints,
    NoFrames,
    PoseInitFailed,
    RigidTransform,
    SingularSystem,
    SurfelCloud,
)
from .warp import EDGraph, apply_warp, bind_points, sample_nodes, warp_points

__version__ = "0.1.0"
