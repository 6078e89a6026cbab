"""Per-stage timings on a ~10k-surfel model with a ~50-node graph."""

import argparse
import time

from defslam.config import PipelineConfig
from defslam.pipeline import ReconstructionState, process_frame
from defslam.simulator import SceneSpec, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--extent", type=float, default=28.0)
    ap.add_argument("--node-spacing", type=float, default=5.0)
    ap.add_argument("--frames", type=int, default=6)
    args = ap.parse_args()
    frames, _ = generate(SceneSpec(extent=args.extent, n_frames=args.frames, random_deformation=(2.0, 3.0), seed=2))
    cfg = PipelineConfig(node_spacing=args.node_spacing)
    state = ReconstructionState()
    for f in frames:
        t0 = time.perf_counter()
        state, rep = process_frame(state, f, cfg)
        dt = time.perf_counter() - t0
        stages = " ".join(f"{k}={v:.2f}" for k, v in rep.timings.items())
        print(f"frame {f.frame_index} {rep.status:11s} surfels {len(state.model):6d} nodes {len(state.graph):3d} "
              f"{dt:.2f}s  {stages}")


if __name__ == "__main__":
    main()
