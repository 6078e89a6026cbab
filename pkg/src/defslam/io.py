"""Frame and model file formats.

* Depth: 16-bit big-endian binary PGM (``P5``, maxval 65535) holding depth in
  0.01 mm units, 0 = invalid; or raw little-endian float32 (mm) with a sidecar
  ``<file>.hdr`` holding ``width``/``height`` lines.
* RGB: binary PPM (``P6``, maxval 255).
* Model: PLY, ASCII or binary little-endian, vertex properties
  ``x y z nx ny nz red green blue weight``.
* Intrinsics: one line ``fx fy cx cy width height``.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .types import CameraIntrinsics, DepthFrame, SurfelCloud

DEPTH_UNIT_MM = 0.01

_PLY_PROPS = [
    ("x", "f8"), ("y", "f8"), ("z", "f8"),
    ("nx", "f8"), ("ny", "f8"), ("nz", "f8"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("weight", "f8"),
]
_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"f8": "double", "f4": "float", "u1": "uchar", "i4": "int", "u4": "uint"}


def _read_netpbm(path: Path, magic: bytes):
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval, with optional comments
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise ValueError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    return w, h, maxval, data[pos + 1 :]


def write_depth_pgm(path, depth_mm: np.ndarray) -> None:
    q = np.rint(np.asarray(depth_mm, dtype=np.float64) / DEPTH_UNIT_MM)
    if q.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit PGM range (655.35 mm)")
    h, w = q.shape
    header = f"P5\n{w} {h}\n65535\n".encode()
    Path(path).write_bytes(header + q.astype(">u2").tobytes())


def read_depth_pgm(path) -> np.ndarray:
    w, h, maxval, body = _read_netpbm(path, b"P5")
    if maxval < 256:
        raise ValueError(f"{path}: depth PGM must be 16-bit")
    arr = np.frombuffer(body[: 2 * w * h], dtype=">u2")
    if arr.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return arr.reshape(h, w).astype(np.float64) * DEPTH_UNIT_MM


def write_depth_raw(path, depth_mm: np.ndarray) -> None:
    d = np.asarray(depth_mm, dtype="<f4")
    h, w = d.shape
    Path(path).write_bytes(d.tobytes())
    Path(str(path) + ".hdr").write_text(f"width {w}\nheight {h}\nunit mm\n")


def read_depth_raw(path) -> np.ndarray:
    hdr = {}
    for line in Path(str(path) + ".hdr").read_text().splitlines():
        parts = line.split()
        if len(parts) == 2:
            hdr[parts[0]] = parts[1]
    w, h = int(hdr["width"]), int(hdr["height"])
    arr = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if arr.size != w * h:
        raise ValueError(f"{path}: expected {w * h} floats, found {arr.size}")
    d = arr.reshape(h, w).astype(np.float64)
    d[~np.isfinite(d) | (d < 0)] = 0.0
    return d


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    w, h, maxval, body = _read_netpbm(path, b"P6")
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    arr = np.frombuffer(body[: 3 * w * h], dtype=np.uint8)
    if arr.size != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return arr.reshape(h, w, 3).copy()


def read_intrinsics(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_text(Path(path).read_text())


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    Path(path).write_text(intr.to_text())


def frame_paths(directory, index: int) -> tuple[Path, Path]:
    d = Path(directory)
    depth = d / f"frame_{index:06d}.depth.pgm"
    if not depth.exists() and (d / f"frame_{index:06d}.depth.raw").exists():
        depth = d / f"frame_{index:06d}.depth.raw"
    return depth, d / f"frame_{index:06d}.rgb.ppm"


def list_frames(directory) -> list[int]:
    pat = re.compile(r"frame_(\d{6})\.depth\.(pgm|raw)$")
    found = set()
    for p in Path(directory).iterdir():
        m = pat.match(p.name)
        if m:
            found.add(int(m.group(1)))
    return sorted(found)


def read_frame(directory, index: int, intr: CameraIntrinsics) -> DepthFrame:
    depth_path, rgb_path = frame_paths(directory, index)
    if depth_path.suffix == ".raw":
        depth = read_depth_raw(depth_path)
    else:
        depth = read_depth_pgm(depth_path)
    rgb = read_ppm(rgb_path)
    return DepthFrame(depth, rgb, intr, index)


def write_frame(directory, frame: DepthFrame) -> None:
    d = Path(directory)
    write_depth_pgm(d / f"frame_{frame.frame_index:06d}.depth.pgm", frame.depth)
    write_ppm(d / f"frame_{frame.frame_index:06d}.rgb.ppm", frame.rgb)


def write_ply(path, cloud: SurfelCloud, binary: bool = True, faces: np.ndarray | None = None) -> None:
    n = len(cloud)
    rec = np.empty(n, dtype=[(name, ("<" if binary else "") + t) for name, t in _PLY_PROPS])
    rec["x"], rec["y"], rec["z"] = cloud.positions.T
    rec["nx"], rec["ny"], rec["nz"] = cloud.normals.T
    rec["red"], rec["green"], rec["blue"] = cloud.colors.T
    rec["weight"] = cloud.weights
    lines = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {n}",
    ]
    lines += [f"property {_PLY_NAMES[t]} {name}" for name, t in _PLY_PROPS]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            fh.write(rec.tobytes())
            if faces is not None:
                frec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                frec["n"] = 3
                frec["idx"] = faces
                fh.write(frec.tobytes())
        else:
            for r in rec:
                fh.write(
                    (
                        " ".join(repr(float(r[k])) for k in ("x", "y", "z", "nx", "ny", "nz"))
                        + f" {r['red']} {r['green']} {r['blue']} {float(r['weight'])!r}\n"
                    ).encode()
                )
            if faces is not None:
                for f in faces:
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode())


def read_ply(path, with_faces: bool = False):
    """Read a PLY point cloud (and optionally triangle faces).

    Missing normal/colour/weight properties default to zero normals, black and
    weight 1.
    """
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[list] = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"{path}: unsupported PLY format {fmt}")

    verts = None
    faces = None
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")
        pos = 0
        for name, count, props in elements:
            chunk = rows[pos : pos + count]
            pos += count
            if name == "vertex":
                arr = np.array([r.split() for r in chunk], dtype=np.float64).reshape(count, len(props))
                verts = {p[0]: arr[:, i] for i, p in enumerate(props)}
            elif name == "face":
                faces = np.array([[int(t) for t in r.split()[1:4]] for r in chunk], dtype=np.int64).reshape(-1, 3)
    else:
        pos = body_start
        for name, count, props in elements:
            if any(isinstance(p[1], tuple) for p in props):
                # triangle lists only
                _, cnt_t, idx_t = props[0][1]
                dt = np.dtype([("n", "<" + cnt_t), ("idx", "<" + idx_t, (3,))])
                arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                pos += dt.itemsize * count
                if name == "face":
                    faces = arr["idx"].astype(np.int64)
                continue
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
            arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            pos += dt.itemsize * count
            if name == "vertex":
                verts = {p[0]: arr[p[0]].astype(np.float64) for p in props}
    if verts is None:
        raise ValueError(f"{path}: no vertex element")

    n = len(verts["x"])

    def col(*names, default=0.0):
        return np.stack([verts.get(k, np.full(n, default)) for k in names], axis=1)

    cloud = SurfelCloud(
        col("x", "y", "z"),
        col("nx", "ny", "nz"),
        col("red", "green", "blue").astype(np.uint8),
        verts.get("weight", np.ones(n)),
    )
    if with_faces:
        return cloud, faces
    return cloud
