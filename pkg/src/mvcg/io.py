"""File formats: PFM and 16-bit PNG depth, TUM trajectories, PNG images, binary PLY."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .geometry import DepthMap, InvalidInputError, PoseSE3
from .metrics import TriangleMesh, Trajectory


class FormatError(InvalidInputError):
    """A file does not follow its declared format."""


# --- PFM -----------------------------------------------------------------------


def write_pfm(path, array: np.ndarray) -> None:
    """Little-endian float32 PFM, rows stored bottom-to-top as the format requires."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        header = b"Pf\n"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = b"PF\n"
    else:
        raise InvalidInputError("PFM holds (H, W) or (H, W, 3) arrays")
    H, W = a.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{W} {H}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file")
        dims = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", f.readline())
        if not dims:
            raise FormatError(f"{path}: malformed PFM size line")
        W, H = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(f.readline().strip())
        except ValueError:
            raise FormatError(f"{path}: malformed PFM scale line") from None
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 3 if kind == b"PF" else 1
        raw = f.read()
    if len(raw) != 4 * W * H * chans:
        raise FormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw, dtype=dtype)
    shape = (H, W, 3) if chans == 3 else (H, W)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_depth_pfm(path, depth: DepthMap) -> None:
    # invalid pixels are 0 already; the sentinel survives the roundtrip
    write_pfm(path, depth.values)


def read_depth_pfm(path, frame_id: int = 0) -> DepthMap:
    vals = read_pfm(path)
    return DepthMap(vals, vals > 0, frame_id)


# --- 16-bit PNG depth ----------------------------------------------------------


def write_depth_png16(path, depth: DepthMap, scale: float = 1000.0) -> None:
    """Depth as uint16 ``round(d * scale)`` with a JSON sidecar declaring the scale."""
    q = np.rint(depth.values * scale)
    if q.max(initial=0) > 65535:
        raise InvalidInputError("depth exceeds the 16-bit range at this scale")
    q = np.where(depth.valid, q, 0).astype(np.uint16)
    Image.fromarray(q).save(path)
    Path(str(path) + ".json").write_text(json.dumps({"depth_scale": scale, "unit": "m"}, sort_keys=True))


def read_depth_png16(path, frame_id: int = 0) -> DepthMap:
    side = Path(str(path) + ".json")
    if not side.exists():
        raise FormatError(f"{path}: missing depth-scale sidecar {side.name}")
    scale = float(json.loads(side.read_text())["depth_scale"])
    q = np.asarray(Image.open(path)).astype(np.float64)
    return DepthMap(q / scale, q > 0, frame_id)


# --- images and masks ------------------------------------------------------------


def write_image(path, image: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def read_image(path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.float64) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


# --- TUM trajectories ------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_tum(path, traj: Trajectory, timestamps=None) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line, camera-to-world."""
    stamps = traj.ids if timestamps is None else timestamps
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, pose in zip(stamps, traj.poses):
        c2w = pose.inverse()
        q = Rotation.from_matrix(c2w.rotation).as_quat()
        if q[3] < 0:
            q = -q
        vals = [float(ts), *c2w.translation, *q]
        lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path) -> Trajectory:
    """Load a TUM file into world-to-camera poses keyed by integer-valued timestamps."""
    ids, poses = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
        try:
            ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
        except ValueError:
            raise FormatError(f"{path}:{n}: non-numeric field") from None
        q = np.array([qx, qy, qz, qw])
        if not np.isclose(np.linalg.norm(q), 1.0, atol=1e-6):
            raise FormatError(f"{path}:{n}: quaternion is not unit length")
        R_cw = Rotation.from_quat(q).as_matrix()
        poses.append(PoseSE3(R_cw, [tx, ty, tz]).inverse())
        ids.append(int(ts) if float(ts).is_integer() else ts)
    return Trajectory(ids, poses)


# --- PLY ------------------------------------------------------------------------------


def write_ply(path, mesh: TriangleMesh) -> None:
    """Binary little-endian PLY with float32 vertices and int32 indices."""
    nv, nf = len(mesh.vertices), len(mesh.triangles)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {nv}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {nf}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    faces = np.zeros(nf, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(mesh.vertices.astype("<f4").tobytes())
        f.write(faces.tobytes())


def read_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        nv = nf = None
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: header has no end")
            line = line.strip()
            if line.startswith(b"format") and b"binary_little_endian" not in line:
                raise FormatError(f"{path}: only binary little-endian PLY is supported")
            if line.startswith(b"element vertex"):
                nv = int(line.split()[-1])
            elif line.startswith(b"element face"):
                nf = int(line.split()[-1])
            elif line == b"end_header":
                break
        if nv is None or nf is None:
            raise FormatError(f"{path}: missing vertex or face element")
        vbytes, fbytes = f.read(12 * nv), f.read(13 * nf)
    if len(vbytes) != 12 * nv or len(fbytes) != 13 * nf:
        raise FormatError(f"{path}: truncated PLY payload")
    verts = np.frombuffer(vbytes, dtype="<f4").reshape(nv, 3)
    faces = np.frombuffer(fbytes, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    if nf and np.any(faces["n"] != 3):
        raise FormatError(f"{path}: faces must be triangles")
    return TriangleMesh(verts.astype(np.float64), faces["idx"].astype(np.int64))


# --- JSON -------------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, data) -> None:
    """Deterministic JSON: sorted keys, numpy scalars converted, non-finite as null."""
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
