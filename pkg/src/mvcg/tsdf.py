"""TSDF fusion of posed depth maps, mesh extraction, ray casting and completion."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from .geometry import CameraIntrinsics, DepthMap, InvalidInputError, PoseSE3, camera_rays
from .metrics import TriangleMesh

logger = logging.getLogger(__name__)

# provenance codes written by complete_depth
FROM_NONE = 0
FROM_STEREO = 1
FROM_TSDF = 2


class TSDFVolume:
    """Dense voxel grid of normalized truncated signed distances.

    Voxel ``(i, j, k)`` sits at ``origin + voxel_size * (i, j, k)``. Signed
    distance is stored divided by ``mu`` so it lies in ``[-1, 1]``; voxels that
    were never observed carry weight 0 (and sdf 1).
    """

    def __init__(self, origin, dims, voxel_size: float = 0.01, mu: float | None = None, weight_cap: float = 64.0):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(n) for n in dims)
        self.voxel_size = float(voxel_size)
        self.mu = 4 * self.voxel_size if mu is None else float(mu)
        self.weight_cap = float(weight_cap)
        if self.voxel_size <= 0 or min(self.dims) < 2:
            raise InvalidInputError("volume needs positive voxel size and at least 2 voxels per axis")
        if self.mu < 2 * self.voxel_size:
            raise InvalidInputError("truncation must be at least two voxels")
        self.sdf = np.ones(self.dims, dtype=np.float64)
        self.weight = np.zeros(self.dims, dtype=np.float64)

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float = 0.01, mu: float | None = None, **kw) -> TSDFVolume:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, dims, voxel_size, mu, **kw)

    @classmethod
    def from_function(cls, fn, lo, hi, voxel_size: float = 0.01, mu: float | None = None) -> TSDFVolume:
        """Volume filled from an analytic signed distance ``fn(points) -> (n,)``."""
        vol = cls.from_bounds(lo, hi, voxel_size, mu)
        d = fn(vol.voxel_centers().reshape(-1, 3)).reshape(vol.dims)
        vol.sdf = np.clip(d / vol.mu, -1.0, 1.0)
        vol.weight = np.ones(vol.dims)
        return vol

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel_size * (np.array(self.dims) - 1)

    def voxel_centers(self) -> np.ndarray:
        axes = [self.origin[a] + self.voxel_size * np.arange(self.dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> TSDFVolume:
        out = TSDFVolume(self.origin, self.dims, self.voxel_size, self.mu, self.weight_cap)
        out.sdf = self.sdf.copy()
        out.weight = self.weight.copy()
        return out

    # -- serialization: header then float64 sdf and weight, C order ----------
    _MAGIC = b"TSDF1\n"

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self._MAGIC)
            f.write(struct.pack("<3i", *self.dims))
            f.write(struct.pack("<6d", *self.origin, self.voxel_size, self.mu, self.weight_cap))
            f.write(self.sdf.astype("<f8").tobytes())
            f.write(self.weight.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> TSDFVolume:
        data = Path(path).read_bytes()
        m = len(cls._MAGIC)
        if data[:m] != cls._MAGIC:
            raise InvalidInputError(f"{path}: not a TSDF volume file")
        if len(data) < m + 60:
            raise InvalidInputError(f"{path}: truncated TSDF volume header")
        dims = struct.unpack_from("<3i", data, m)
        ox, oy, oz, vs, mu, cap = struct.unpack_from("<6d", data, m + 12)
        vol = cls((ox, oy, oz), dims, vs, mu, cap)
        n = int(np.prod(dims))
        off = m + 12 + 48
        if len(data) != off + 16 * n:
            raise InvalidInputError(f"{path}: truncated TSDF volume file")
        vol.sdf = np.frombuffer(data, "<f8", n, off).reshape(dims).copy()
        vol.weight = np.frombuffer(data, "<f8", n, off + 8 * n).reshape(dims).copy()
        return vol

    # -- integration ---------------------------------------------------------

    def integrate(self, depth: DepthMap, pose: PoseSE3, K: CameraIntrinsics) -> TSDFVolume:
        """Projective TSDF update with one depth map (in place; returns self).

        Every voxel in front of the observed surface, or behind it by less than
        ``mu``, is averaged in with weight 1. Voxels further behind are left alone.
        """
        if depth.shape != (K.height, K.width):
            raise InvalidInputError("depth map does not match the intrinsics")
        pts = self.voxel_centers().reshape(-1, 3)
        pc = pts @ pose.rotation.T + pose.translation
        z = pc[:, 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        u = np.rint(K.fx * pc[:, 0] / zs + K.cx).astype(np.int64)
        v = np.rint(K.fy * pc[:, 1] / zs + K.cy).astype(np.int64)
        inside = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        uu = np.where(inside, u, 0)
        vv = np.where(inside, v, 0)
        d = depth.values[vv, uu]
        ok = inside & depth.valid[vv, uu]
        diff = d - z
        upd = ok & (diff >= -self.mu)
        s = np.clip(diff[upd] / self.mu, -1.0, 1.0)

        sdf = self.sdf.reshape(-1)
        w = self.weight.reshape(-1)
        w_old = w[upd]
        sdf[upd] = (w_old * sdf[upd] + s) / (w_old + 1.0)
        w[upd] = np.minimum(w_old + 1.0, self.weight_cap)
        return self

    # -- queries -------------------------------------------------------------

    def sample(self, points: np.ndarray):
        """Trilinear sdf (in meters) at world points plus a known-flag.

        A sample is known when it lies inside the grid and all 8 corners have
        positive weight.
        """
        g = (points - self.origin) / self.voxel_size
        n = np.array(self.dims)
        inside = np.all((g >= 0) & (g <= n - 1), axis=-1)
        g = np.clip(g, 0, n - 1)
        i0 = np.minimum(np.floor(g).astype(np.int64), n - 2)
        f = g - i0
        val = np.zeros(points.shape[:-1])
        known = inside.copy()
        for dx in (0, 1):
            wx = f[..., 0] if dx else 1 - f[..., 0]
            for dy in (0, 1):
                wy = f[..., 1] if dy else 1 - f[..., 1]
                for dz in (0, 1):
                    wz = f[..., 2] if dz else 1 - f[..., 2]
                    ix, iy, iz = i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz
                    val += wx * wy * wz * self.sdf[ix, iy, iz]
                    known &= self.weight[ix, iy, iz] > 0
        return val * self.mu, known

    def ray_box(self, origin: np.ndarray, dirs: np.ndarray):
        """Entry/exit distances of rays through the grid's bounding box."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (self.origin - origin) * inv
            tb = (self.upper - origin) * inv
        tmin = np.nan_to_num(np.minimum(ta, tb), nan=-np.inf).max(axis=-1)
        tmax = np.nan_to_num(np.maximum(ta, tb), nan=np.inf).min(axis=-1)
        return np.maximum(tmin, 0.0), tmax


def extract_mesh(volume: TSDFVolume) -> TriangleMesh:
    """Zero level set of the sdf between observed voxels (marching cubes).

    Every marching-cubes vertex lies on a grid edge; triangles touching an
    edge with an unobserved endpoint are dropped, so the jump from observed
    negative space to never-seen voxels makes no surface.
    """
    seen = volume.weight > 0
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if not seen.any():
        return empty
    known = volume.sdf[seen]
    if known.min() > 0 or known.max() < 0:
        return empty
    try:
        verts, faces, normals, _ = marching_cubes(volume.sdf, level=0.0, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return empty
    hi = np.array(volume.dims) - 1
    lo_idx = np.clip(np.floor(verts).astype(np.int64), 0, hi)
    hi_idx = np.clip(np.ceil(verts).astype(np.int64), 0, hi)
    ok_v = seen[tuple(lo_idx.T)] & seen[tuple(hi_idx.T)]
    faces = faces[ok_v[faces].all(axis=1)]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = verts[used] * volume.voxel_size + volume.origin
    return TriangleMesh(verts, remap[faces], normals[used])


def render_depth(
    volume: TSDFVolume,
    pose: PoseSE3,
    K: CameraIntrinsics,
    max_steps: int = 2000,
    bisect_iters: int = 12,
) -> DepthMap:
    """Ray cast the first +/- zero crossing of the fused sdf.

    Rays march with sphere-tracing steps (bounded by half a voxel from below
    and ``mu`` from above) through known voxels and half-voxel steps through
    unknown space; the bracketed crossing is refined by bisection.
    """
    origin, dirs, z_per_t = camera_rays(pose, K)
    d = dirs.reshape(-1, 3)
    t_in, t_out = volume.ray_box(origin, d)
    n = len(d)
    alive = t_in < t_out
    t = t_in.copy()
    prev_t = np.full(n, np.nan)
    prev_s = np.full(n, np.nan)
    prev_known = np.zeros(n, dtype=bool)
    hit_lo = np.zeros(n)
    hit_hi = np.zeros(n)
    found = np.zeros(n, dtype=bool)
    h = 0.5 * volume.voxel_size

    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        s, known = volume.sample(origin + t[idx, None] * d[idx])
        cross = prev_known[idx] & known & (prev_s[idx] > 0) & (s <= 0)
        ci = idx[cross]
        hit_lo[ci] = prev_t[ci]
        hit_hi[ci] = t[ci]
        found[ci] = True
        alive[ci] = False

        rest = ~cross
        ri = idx[rest]
        prev_t[ri] = t[ri]
        prev_s[ri] = s[rest]
        prev_known[ri] = known[rest]
        step = np.where(known[rest] & (s[rest] > 0), np.clip(s[rest], h, volume.mu), h)
        t[ri] += step
        alive[ri] &= t[ri] <= t_out[ri]

    fi = np.flatnonzero(found)
    lo, hi = hit_lo[fi], hit_hi[fi]
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        s, known = volume.sample(origin + mid[:, None] * d[fi])
        pos = (s > 0) | ~known
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    s_lo, _ = volume.sample(origin + lo[:, None] * d[fi])
    s_hi, _ = volume.sample(origin + hi[:, None] * d[fi])
    denom = s_lo - s_hi
    frac = np.where(denom > 0, s_lo / np.where(denom > 0, denom, 1.0), 0.5)
    t_hit = lo + np.clip(frac, 0, 1) * (hi - lo)

    depth = np.zeros(n)
    depth[fi] = t_hit * z_per_t.reshape(-1)[fi]
    valid = np.zeros(n, dtype=bool)
    valid[fi] = True
    return DepthMap(depth.reshape(K.height, K.width), valid.reshape(K.height, K.width))


@dataclass
class CompletedDepth:
    depth: DepthMap
    provenance: np.ndarray  # uint8, FROM_* codes


def complete_depth(stereo: DepthMap, tsdf_rendered: DepthMap) -> CompletedDepth:
    """Fill stereo holes with TSDF-rendered depth; stereo always wins.

    The two maps share poses and intrinsics by construction, so no alignment
    is applied between them.
    """
    if stereo.shape != tsdf_rendered.shape:
        raise InvalidInputError("stereo and TSDF depth differ in resolution")
    use_tsdf = ~stereo.valid & tsdf_rendered.valid
    vals = np.where(stereo.valid, stereo.values, np.where(use_tsdf, tsdf_rendered.values, 0.0))
    prov = np.full(stereo.shape, FROM_NONE, dtype=np.uint8)
    prov[stereo.valid] = FROM_STEREO
    prov[use_tsdf] = FROM_TSDF
    return CompletedDepth(DepthMap(vals, stereo.valid | use_tsdf, stereo.frame_id), prov)


def fuse_depths(depths, poses, K: CameraIntrinsics, lo, hi, voxel_size: float = 0.01, mu=None) -> TSDFVolume:
    vol = TSDFVolume.from_bounds(lo, hi, voxel_size, mu)
    for dm, pose in zip(depths, poses):
        vol.integrate(dm, pose, K)
    return vol


def depth_bounds(depths, poses, K: CameraIntrinsics, margin: float = 0.05, stride: int = 2):
    """Axis-aligned box around all back-projected valid depth pixels."""
    from .geometry import pixel_grid, unproject_array

    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    u, v = pixel_grid(K.height, K.width)
    for dm, pose in zip(depths, poses):
        m = dm.valid[::stride, ::stride]
        if not m.any():
            continue
        x, y, z = unproject_array(u[::stride, ::stride][m], v[::stride, ::stride][m], dm.values[::stride, ::stride][m], K)
        pw = (np.stack([x, y, z], axis=1) - pose.translation) @ pose.rotation
        lo = np.minimum(lo, pw.min(0))
        hi = np.maximum(hi, pw.max(0))
    if not np.all(np.isfinite(lo)):
        raise InvalidInputError("no valid depth to bound")
    return lo - margin, hi + margin
