"""Dense-grid radiance field: emission-absorption rendering and fitting.

Density (1/m) and view-independent RGB live on the nodes of a ``D^3`` grid
spanning an axis-aligned box and are trilinearly interpolated; outside the
box density is zero. Images are compared at a reduced scale (default 1/8)
against box-averaged observations.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.ndimage import map_coordinates

from .geometry import CameraIntrinsics, InvalidInputError, PoseSE3, Ray, box_downsample, camera_rays

logger = logging.getLogger(__name__)


class InsufficientViewsError(InvalidInputError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 64
    near: float = 0.1
    far: float = 3.0
    downsample: int = 8
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.n_samples < 2:
            raise InvalidInputError("need at least 2 samples per ray")
        if not 0 < self.near < self.far:
            raise InvalidInputError("need 0 < near < far")


@dataclass(frozen=True)
class FitSchedule:
    """Grid fitting schedule.

    With ``coarse_to_fine`` the total ``iterations`` are split evenly over
    resolutions ``D/4, D/2, D``; otherwise all run at ``D``.
    """

    resolution: int = 128
    iterations: int = 6000
    coarse_to_fine: bool = True
    lr_density: float = 20.0
    lr_color: float = 0.03
    init_density: float = 1.0
    n_samples: int = 64
    seed: int = 0
    psnr_stop: float | None = None


class DenseGridField:
    def __init__(self, lo, hi, resolution: int, density=None, color=None):
        self.lo = np.asarray(lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(hi, dtype=np.float64).reshape(3)
        if not np.all(self.hi > self.lo):
            raise InvalidInputError("field bounds are degenerate")
        if resolution < 2:
            raise InvalidInputError("grid resolution must be at least 2")
        self.resolution = int(resolution)
        shape = (resolution,) * 3
        self.density = np.zeros(shape) if density is None else np.asarray(density, dtype=np.float64).reshape(shape)
        self.color = np.full(shape + (3,), 0.5) if color is None else np.asarray(color, dtype=np.float64).reshape(shape + (3,))
        self.fitted = False

    @property
    def cell(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.resolution - 1)

    def project_params(self) -> None:
        np.maximum(self.density, 0.0, out=self.density)
        np.clip(self.color, 0.0, 1.0, out=self.color)

    def trilinear(self, points: np.ndarray):
        """Corner indices (n, 8) into the flattened grid and weights (n, 8).

        Points outside the box get all-zero weights.
        """
        D = self.resolution
        g = (points - self.lo) / self.cell
        inside = np.all((g >= 0) & (g <= D - 1), axis=-1)
        g = np.clip(g, 0, D - 1)
        i0 = np.minimum(np.floor(g).astype(np.int64), D - 2)
        f = g - i0
        idx = np.empty(points.shape[:-1] + (8,), dtype=np.int64)
        w = np.empty(points.shape[:-1] + (8,))
        k = 0
        for dx in (0, 1):
            wx = f[..., 0] if dx else 1 - f[..., 0]
            for dy in (0, 1):
                wy = f[..., 1] if dy else 1 - f[..., 1]
                for dz in (0, 1):
                    wz = f[..., 2] if dz else 1 - f[..., 2]
                    idx[..., k] = ((i0[..., 0] + dx) * D + (i0[..., 1] + dy)) * D + (i0[..., 2] + dz)
                    w[..., k] = wx * wy * wz
                    k += 1
        w *= inside[..., None]
        return idx, w

    def sample(self, points: np.ndarray):
        idx, w = self.trilinear(points)
        sigma = (self.density.reshape(-1)[idx] * w).sum(-1)
        rgb = (self.color.reshape(-1, 3)[idx] * w[..., None]).sum(-2)
        return sigma, rgb

    def upsampled(self, resolution: int) -> DenseGridField:
        """Trilinear resampling of the grid onto a finer node lattice."""
        D = self.resolution
        c = np.linspace(0, D - 1, resolution)
        gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
        coords = np.stack([gx, gy, gz])
        dens = map_coordinates(self.density, coords, order=1)
        col = np.stack([map_coordinates(self.color[..., k], coords, order=1) for k in range(3)], axis=-1)
        out = DenseGridField(self.lo, self.hi, resolution, dens, col)
        out.fitted = self.fitted
        return out

    def copy(self) -> DenseGridField:
        out = DenseGridField(self.lo, self.hi, self.resolution, self.density.copy(), self.color.copy())
        out.fitted = self.fitted
        return out

    def ray_box(self, origins: np.ndarray, dirs: np.ndarray):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (self.lo - origins) * inv
            tb = (self.hi - origins) * inv
        tmin = np.nan_to_num(np.minimum(ta, tb), nan=-np.inf).max(axis=-1)
        tmax = np.nan_to_num(np.maximum(ta, tb), nan=np.inf).min(axis=-1)
        return tmin, tmax

    # -- serialization: header (magic, D, bounds) then float32 density and color
    _MAGIC = b"DGF1"

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self._MAGIC)
            f.write(struct.pack("<I", self.resolution))
            f.write(struct.pack("<6d", *self.lo, *self.hi))
            f.write(self.density.astype("<f4").tobytes())
            f.write(self.color.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> DenseGridField:
        data = Path(path).read_bytes()
        if data[:4] != cls._MAGIC:
            raise InvalidInputError(f"{path}: not a field file")
        off = 8 + 48
        if len(data) < off:
            raise InvalidInputError(f"{path}: truncated field header")
        (D,) = struct.unpack_from("<I", data, 4)
        bounds = struct.unpack_from("<6d", data, 8)
        n = D**3
        if len(data) != off + 16 * n:
            raise InvalidInputError(f"{path}: truncated field file")
        dens = np.frombuffer(data, "<f4", n, off).astype(np.float64)
        col = np.frombuffer(data, "<f4", 3 * n, off + 4 * n).astype(np.float64)
        out = cls(bounds[:3], bounds[3:], D, dens, col)
        out.fitted = True
        return out


# --- compositing -----------------------------------------------------------------


def _deltas(t: np.ndarray) -> np.ndarray:
    d = np.diff(t, axis=-1)
    return np.concatenate([d, d[..., -1:]], axis=-1)


def composite(sigma, rgb, t, background=(0.0, 0.0, 0.0), _keep=False):
    """Emission-absorption compositing along rays.

    ``sigma`` (R, S), ``rgb`` (R, S, 3), sorted ``t`` (R, S). The last
    interval repeats the previous spacing. Returns ``(color, depth,
    opacity, weights, T_final)``; depth is NaN where opacity is 0.
    """
    delta = _deltas(t)
    tau = sigma * delta
    cum = np.cumsum(tau, axis=-1)
    T_next = np.exp(-cum)
    T = np.empty_like(T_next)
    T[..., 0] = 1.0
    T[..., 1:] = T_next[..., :-1]
    w = T - T_next
    T_final = T_next[..., -1]
    opacity = w.sum(-1)
    color = np.einsum("...s,...sc->...c", w, rgb) + T_final[..., None] * np.asarray(background)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(opacity > 0, (w * t).sum(-1) / opacity, np.nan)
    if _keep:
        return color, depth, opacity, w, T_final, (delta, T_next)
    return color, depth, opacity, w, T_final


def composite_backward(sigma, rgb, t, background, grad_color, _fwd=None):
    """Gradients of ``sum(grad_color * color)`` w.r.t. sample densities and colors."""
    if _fwd is None:
        _fwd = composite(sigma, rgb, t, background, _keep=True)
    _, _, _, w, T_final, (delta, T_next) = _fwd
    g_rgb = w[..., None] * grad_color[..., None, :]
    # project onto the upstream gradient first: everything below is per-sample scalar
    c_up = np.einsum("...sc,...c->...s", rgb, grad_color)
    wc = w * c_up
    suffix = np.cumsum(wc[..., ::-1], axis=-1)[..., ::-1] - wc  # sum over j > k
    tail = suffix + T_final[..., None] * (grad_color @ np.asarray(background, dtype=np.float64))[..., None]
    g_sigma = delta * (T_next * c_up - tail)
    return g_sigma, g_rgb


def uniform_samples(t0, t1, n: int):
    """Midpoints of ``n`` equal bins over ``[t0, t1]`` per ray; shape (R, n)."""
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    frac = (np.arange(n) + 0.5) / n
    return t0[..., None] + (t1 - t0)[..., None] * frac


def ray_interval(field: DenseGridField, origins, dirs, cfg: RenderConfig):
    """``[max(near, box entry), min(far, box exit)]`` and a hit flag."""
    tmin, tmax = field.ray_box(origins, dirs)
    t0 = np.maximum(tmin, cfg.near)
    t1 = np.minimum(tmax, cfg.far)
    return t0, t1, t1 > t0


def render_samples(field: DenseGridField, origins, dirs, t, background=(0.0, 0.0, 0.0)):
    """Render rays at explicit sorted sample distances ``t`` (R, S)."""
    pts = origins[..., None, :] + t[..., None] * dirs[..., None, :]
    sigma, rgb = field.sample(pts)
    return composite(sigma, rgb, t, background)


def render_backward(field: DenseGridField, origins, dirs, t, grad_color, background=(0.0, 0.0, 0.0)):
    """Gradients of ``sum(grad_color * color)`` w.r.t. the grid density and color arrays."""
    pts = origins[..., None, :] + t[..., None] * dirs[..., None, :]
    idx, w = field.trilinear(pts)
    sigma = (field.density.reshape(-1)[idx] * w).sum(-1)
    rgb = (field.color.reshape(-1, 3)[idx] * w[..., None]).sum(-2)
    g_sigma, g_rgb = composite_backward(sigma, rgb, t, background, grad_color)
    gd = np.zeros(field.density.size)
    gc = np.zeros((field.density.size, 3))
    np.add.at(gd, idx.reshape(-1), (w * g_sigma[..., None]).reshape(-1))
    np.add.at(gc, idx.reshape(-1), (w[..., None] * g_rgb[..., None, :]).reshape(-1, 3))
    return gd.reshape(field.density.shape), gc.reshape(field.color.shape)


def render_rays(field: DenseGridField, origins, dirs, cfg: RenderConfig):
    """Uniformly sampled rendering. Returns ``(color, t_depth, opacity)``."""
    origins = np.broadcast_to(origins, dirs.shape)
    t0, t1, hit = ray_interval(field, origins, dirs, cfg)
    n = dirs.shape[0]
    color = np.tile(np.asarray(cfg.background, dtype=np.float64), (n, 1))
    depth = np.full(n, np.nan)
    opacity = np.zeros(n)
    if hit.any():
        t = uniform_samples(t0[hit], t1[hit], cfg.n_samples)
        c, d, o, _, _ = render_samples(field, origins[hit], dirs[hit], t, cfg.background)
        color[hit], depth[hit], opacity[hit] = c, d, o
    return color, depth, opacity


def render_ray(field: DenseGridField, ray: Ray, cfg: RenderConfig = RenderConfig()):
    """Color, expected distance along the ray and opacity of one ray."""
    cfg2 = RenderConfig(cfg.n_samples, max(cfg.near, ray.near), min(cfg.far, ray.far), cfg.downsample, cfg.background)
    c, d, o = render_rays(field, ray.origin[None], ray.direction[None], cfg2)
    return c[0], float(d[0]), float(o[0])


def downsampled_camera(K: CameraIntrinsics, factor: int) -> CameraIntrinsics:
    """Camera of the ``factor`` x ``factor`` box-averaged image."""
    return K.box_downsampled(factor)


def render_view_downsampled(field: DenseGridField, pose: PoseSE3, K: CameraIntrinsics, cfg: RenderConfig = RenderConfig()):
    """Render the reduced-scale view. Returns ``(rgb (h, w, 3), z-depth (h, w), opacity)``."""
    Kd = downsampled_camera(K, cfg.downsample)
    origin, dirs, z_per_t = camera_rays(pose, Kd)
    flat = dirs.reshape(-1, 3)
    c, d, o = render_rays(field, origin, flat, cfg)
    shape = (Kd.height, Kd.width)
    return c.reshape(shape + (3,)), (d * z_per_t.reshape(-1)).reshape(shape), o.reshape(shape)


def render_rays_guided(field: DenseGridField, origins, dirs, d_hat, sigma_d: float, cfg: RenderConfig, n_samples: int = 16, seed: int = 0):
    """Rendering with samples concentrated around per-ray distances ``d_hat``.

    Rays without a usable ``d_hat`` fall back to stratified uniform samples.
    Returns ``(color, t_depth, opacity)``.
    """
    from .sampling import guided_samples_batch

    origins = np.broadcast_to(origins, dirs.shape)
    t0, t1, hit = ray_interval(field, origins, dirs, cfg)
    n = dirs.shape[0]
    color = np.tile(np.asarray(cfg.background, dtype=np.float64), (n, 1))
    depth = np.full(n, np.nan)
    opacity = np.zeros(n)
    if hit.any():
        d = np.nan_to_num(np.asarray(d_hat, dtype=np.float64)[hit], nan=-1.0)
        t = guided_samples_batch(d, sigma_d, t0[hit], t1[hit], n_samples, np.random.default_rng(seed))
        c, dd, o, _, _ = render_samples(field, origins[hit], dirs[hit], t, cfg.background)
        color[hit], depth[hit], opacity[hit] = c, dd, o
    return color, depth, opacity


def render_view_guided(field, pose, K, guide_z, sigma_d: float, cfg: RenderConfig = RenderConfig(), n_samples: int = 16, seed: int = 0):
    """Reduced-scale view rendered with depth-guided samples.

    ``guide_z`` is a reduced-scale z-depth map; zeros mark missing guidance.
    """
    Kd = downsampled_camera(K, cfg.downsample)
    origin, dirs, z_per_t = camera_rays(pose, Kd)
    shape = (Kd.height, Kd.width)
    guide_z = np.asarray(guide_z, dtype=np.float64)
    if guide_z.shape != shape:
        raise InvalidInputError(f"guide shape {guide_z.shape} does not match reduced view {shape}")
    d_hat = np.where(guide_z > 0, guide_z, np.nan).reshape(-1) / z_per_t.reshape(-1)
    c, d, o = render_rays_guided(field, origin, dirs.reshape(-1, 3), d_hat, sigma_d, cfg, n_samples, seed)
    return c.reshape(shape + (3,)), (d * z_per_t.reshape(-1)).reshape(shape), o.reshape(shape)


def downsample_observation(image: np.ndarray, factor: int) -> np.ndarray:
    return box_downsample(np.asarray(image, dtype=np.float64), factor)


def nerf_residuals(field, pose, K, image, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Per-pixel L1 color error between the reduced-scale render and the box-averaged image."""
    rgb, _, _ = render_view_downsampled(field, pose, K, cfg)
    obs = downsample_observation(image, cfg.downsample)
    if obs.ndim == 2:
        obs = np.repeat(obs[..., None], 3, axis=-1)
    return np.abs(rgb - obs).sum(-1).reshape(-1)


def nerf_photometric_energy(field, images, poses, K, cfg: RenderConfig = RenderConfig(), loss=None, scale: float = 1.0) -> float:
    """Sum over frames and reduced-scale pixels of ``rho(|I_hat - S(I)|_1 / scale)``."""
    from .robust_ba import RobustLossConfig, robust_rho

    loss = loss or RobustLossConfig()
    total = 0.0
    for img, pose in zip(images, poses):
        r = nerf_residuals(field, pose, K, img, cfg) / scale
        total += float(robust_rho(r, loss).sum())
    return total


# --- fitting -----------------------------------------------------------------------


@dataclass
class FitHistory:
    loss: list = dc_field(default_factory=list)
    psnr: list = dc_field(default_factory=list)
    levels: list = dc_field(default_factory=list)


@dataclass
class _Batch:
    A: sparse.csr_matrix  # (R*S, D^3) trilinear weights
    t: np.ndarray
    target: np.ndarray
    n_rays: int
    miss_sse: float


def _training_rays(field, images, poses, K, cfg: RenderConfig, n_samples: int, guide=None, sigma_d=None, seed=0):
    """Ray batch over every reduced-scale pixel of every view.

    With ``guide`` (per-view reduced-scale z-depth maps) samples follow the
    truncated Gaussian around the guide depth; otherwise uniform midpoints.
    """
    from .sampling import guided_samples_batch

    Kd = downsampled_camera(K, cfg.downsample)
    O, Dr, T, Y, Hit = [], [], [], [], []
    rng = np.random.default_rng(seed)
    for k, (img, pose) in enumerate(zip(images, poses)):
        origin, dirs, z_per_t = camera_rays(pose, Kd)
        flat = dirs.reshape(-1, 3)
        orig = np.broadcast_to(origin, flat.shape)
        t0, t1, hit = ray_interval(field, orig, flat, cfg)
        t0 = np.where(hit, t0, cfg.near)
        t1 = np.where(hit, t1, cfg.far)
        if guide is None:
            t = uniform_samples(t0, t1, n_samples)
        else:
            d_hat = guide[k].reshape(-1) / z_per_t.reshape(-1)
            t = guided_samples_batch(d_hat, sigma_d, t0, t1, n_samples, rng)
        obs = downsample_observation(img, cfg.downsample)
        if obs.ndim == 2:
            obs = np.repeat(obs[..., None], 3, axis=-1)
        O.append(orig)
        Dr.append(flat)
        T.append(t)
        Y.append(obs.reshape(-1, 3))
        Hit.append(hit)
    O, Dr, T, Y, Hit = map(np.concatenate, (O, Dr, T, Y, Hit))
    n_rays = len(T)
    # rays missing the box render pure background: constant loss, no parameters
    miss_sse = float(((Y[~Hit] - np.asarray(cfg.background)) ** 2).sum())
    O, Dr, T, Y = O[Hit], Dr[Hit], T[Hit], Y[Hit]
    pts = O[:, None, :] + T[..., None] * Dr[:, None, :]
    idx, w = field.trilinear(pts.reshape(-1, 3))
    n = idx.shape[0]
    A = sparse.csr_matrix((w.reshape(-1), (np.repeat(np.arange(n), 8), idx.reshape(-1))), shape=(n, field.resolution**3))
    return _Batch(A, T, Y, n_rays, miss_sse)


def _loss_and_grad(field, batch: _Batch, background):
    R, S = batch.t.shape
    sigma = (batch.A @ field.density.reshape(-1)).reshape(R, S)
    rgb = (batch.A @ field.color.reshape(-1, 3)).reshape(R, S, 3)
    fwd = composite(sigma, rgb, batch.t, background, _keep=True)
    diff = fwd[0] - batch.target
    n = 3 * batch.n_rays
    loss = (float((diff**2).sum()) + batch.miss_sse) / n
    gc = 2.0 * diff / n
    g_sigma, g_rgb = composite_backward(sigma, rgb, batch.t, background, gc, fwd)
    gd = batch.A.T @ g_sigma.reshape(-1)
    gcol = batch.A.T @ g_rgb.reshape(-1, 3)
    return loss, float(10 * np.log10(1.0 / max(loss, 1e-20))), gd, gcol


class _Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0

    def step(self, param, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        param -= self.lr * mh / (np.sqrt(vh) + self.eps)


def fit_field(
    images,
    poses,
    K: CameraIntrinsics,
    lo,
    hi,
    cfg: RenderConfig = RenderConfig(),
    schedule: FitSchedule = FitSchedule(),
    guide=None,
    sigma_d: float | None = None,
    init: DenseGridField | None = None,
):
    """Least-squares fit of a dense grid to posed images at reduced scale.

    Adam on raw grid values with projection onto ``density >= 0`` and
    ``color in [0, 1]``. Coarse-to-fine runs ``D/4 -> D/2 -> D`` with
    trilinear warm starts. ``guide`` switches ray sampling to the truncated
    Gaussian around the given reduced-scale depths. Returns ``(field, history)``.
    """
    if len(images) < 3:
        raise InsufficientViewsError("fitting needs at least 3 posed views")
    D = schedule.resolution
    levels = [max(D // 4, 2), max(D // 2, 2), D] if schedule.coarse_to_fine else [D]
    per_level = [schedule.iterations // len(levels)] * len(levels)
    per_level[-1] += schedule.iterations - sum(per_level)
    hist = FitHistory()
    if init is not None:
        fld = init.upsampled(levels[0]) if init.resolution != levels[0] else init.copy()
    else:
        fld = DenseGridField(lo, hi, levels[0])
        fld.density[:] = schedule.init_density
    for li, (res, iters) in enumerate(zip(levels, per_level)):
        if fld.resolution != res:
            fld = fld.upsampled(res)
        batch = _training_rays(fld, images, poses, K, cfg, schedule.n_samples, guide, sigma_d, schedule.seed + li)
        opt_d = _Adam(fld.density.size, schedule.lr_density)
        opt_c = _Adam((fld.density.size, 3), schedule.lr_color)
        dens = fld.density.reshape(-1)
        col = fld.color.reshape(-1, 3)
        for it in range(iters):
            loss, p, gd, gc = _loss_and_grad(fld, batch, cfg.background)
            hist.loss.append(loss)
            hist.psnr.append(p)
            hist.levels.append(res)
            if schedule.psnr_stop is not None and p >= schedule.psnr_stop:
                break
            opt_d.step(dens, gd)
            opt_c.step(col, gc)
            fld.project_params()
        logger.info("field level D=%d: loss %.3g psnr %.2f", res, hist.loss[-1], hist.psnr[-1])
    fld.fitted = True
    return fld, hist


def training_psnr(field, images, poses, K, cfg: RenderConfig = RenderConfig()) -> float:
    from .metrics import psnr

    vals = []
    for img, pose in zip(images, poses):
        rgb, _, _ = render_view_downsampled(field, pose, K, cfg)
        obs = downsample_observation(img, cfg.downsample)
        vals.append(((rgb - obs) ** 2).mean())
    mse = float(np.mean(vals))
    return 99.0 if mse == 0 else min(99.0, 10 * np.log10(1.0 / mse))
