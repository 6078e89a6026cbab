"""Command-line front end: ``defslam reconstruct | simulate | evaluate``.

Exit codes: 0 success, 2 malformed or missing input, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config
from .io import list_frames, read_frame, read_intrinsics, read_ply, write_frame, write_intrinsics, write_ply
from .pipeline import SUMMARY_COLUMNS, report_row, run_sequence
from .simulator import SceneSpec, generate, surface_distance
from .types import DefSlamError, SurfelCloud

logger = logging.getLogger("defslam")

EXIT_OK, EXIT_INPUT, EXIT_PIPELINE = 0, 2, 3
TRACE_COLUMNS = ["frame", "iteration", "trial_energy", "mu", "accepted"]


class InputError(Exception):
    """Malformed or missing input; the message names the offending file."""


def _set_threads(n: int) -> None:
    import cv2

    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)
    cv2.setNumThreads(n if n > 0 else -1)


def _load_cfg(path: str | None, seed: int | None) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        try:
            cfg = load_config(p)
        except (ValueError, TypeError) as exc:
            raise InputError(f"{p}: {exc}") from exc
    if seed is not None:
        cfg.seed = seed
        cfg.ransac.seed = seed
    return cfg


def _frames(directory: Path, intr):
    for i in list_frames(directory):
        try:
            yield read_frame(directory, i, intr)
        except (OSError, ValueError) as exc:
            raise InputError(f"frame {i} in {directory}: {exc}") from exc


def cmd_reconstruct(args) -> int:
    src, out = Path(args.input), Path(args.output)
    if not src.is_dir():
        raise InputError(f"input directory not found: {src}")
    intr_path = src / "intrinsics.txt"
    if not intr_path.is_file():
        raise InputError(f"missing intrinsics file: {intr_path}")
    try:
        intr = read_intrinsics(intr_path)
    except ValueError as exc:
        raise InputError(f"{intr_path}: {exc}") from exc
    if not list_frames(src):
        raise InputError(f"no frame_%06d.depth.pgm files in {src}")
    cfg = _load_cfg(args.config, args.seed)
    out.mkdir(parents=True, exist_ok=True)

    trace = [] if args.trace else None
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)

        def on_frame(state, report, frame):
            writer.writerow(report_row(report))
            logger.info("frame %d %s residual %.3f mm", report.frame_index, report.status, report.mean_residual)

        result = run_sequence(
            _frames(src, intr), cfg, export_dir=out, export_every=args.export_every, on_frame=on_frame, trace=trace
        )
    write_ply(out / "final_model.ply", result.state.model)
    if trace is not None:
        with open(out / "trace.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for f, it, e, mu, ok in trace:
                writer.writerow([f, it, f"{e:.9g}", f"{mu:.6g}", int(ok)])
    print(json.dumps(result.summary, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec_path, out = Path(args.spec), Path(args.output)
    if not spec_path.is_file():
        raise InputError(f"scene spec not found: {spec_path}")
    try:
        spec = SceneSpec.load(spec_path)
    except (ValueError, TypeError, KeyError) as exc:
        raise InputError(f"{spec_path}: {exc}") from exc
    if args.seed is not None:
        spec.seed = args.seed
    frames, truth = generate(spec)
    out.mkdir(parents=True, exist_ok=True)
    write_intrinsics(out / "intrinsics.txt", spec.intrinsics)
    (out / "scene.json").write_text(spec.to_json())
    for f, frame in enumerate(frames):
        write_frame(out, frame)
        v = truth.camera_vertices(f)
        mesh = SurfelCloud(v, np.zeros_like(v), np.zeros((len(v), 3), np.uint8), np.ones(len(v)))
        write_ply(out / f"truth_{f:06d}.ply", mesh, faces=truth.faces)
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


EVAL_COLUMNS = ["frame", "n", "mean_mm", "median_mm", "max_mm"]


def cmd_evaluate(args) -> int:
    model_path, truth_dir = Path(args.model), Path(args.truth)
    if not model_path.is_file():
        raise InputError(f"model file not found: {model_path}")
    truth_path = truth_dir / f"truth_{args.frame:06d}.ply"
    if not truth_path.is_file():
        raise InputError(f"ground-truth mesh not found: {truth_path}")
    try:
        model = read_ply(model_path)
        mesh, faces = read_ply(truth_path, with_faces=True)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if len(model) == 0:
        raise InputError(f"{model_path}: model is empty")
    if faces is None or len(faces) == 0:
        raise InputError(f"{truth_path}: no faces")
    d = surface_distance(model.positions, mesh.positions, faces)
    if not args.no_header:
        print(",".join(EVAL_COLUMNS))
    print(f"{args.frame},{len(d)},{d.mean():.6f},{np.median(d):.6f},{d.max():.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="defslam", description="Deformable surface reconstruction from depth + RGB frames.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=0, help="worker threads, 0 = auto")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="run the pipeline over a frame directory")
    r.add_argument("input", help="directory with frame_%%06d.depth.pgm, frame_%%06d.rgb.ppm and intrinsics.txt")
    r.add_argument("output", help="output directory")
    r.add_argument("--config", help="JSON config with flat keys")
    r.add_argument("--seed", type=int)
    r.add_argument("--export-every", type=int, default=0, metavar="N", help="write model_%%06d.ply every N frames")
    r.add_argument("--trace", action="store_true", help="write per-LM-trial trace.csv")
    r.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("simulate", help="render a synthetic sequence with ground truth")
    s.add_argument("spec", help="scene spec JSON")
    s.add_argument("output")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="surface distance of a model to a ground-truth mesh")
    e.add_argument("model", help="model PLY")
    e.add_argument("truth", help="simulator output directory holding truth_%%06d.ply")
    e.add_argument("--frame", type=int, default=0)
    e.add_argument("--no-header", action="store_true")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _set_threads(args.threads)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DefSlamError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
