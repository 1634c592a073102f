"""Confidence-weighted joint optimization of window poses and dense depths.

Energy of a window (all terms are sums of robust penalties):

- photometric: ``rho((I_j(pi(T_j T_i^-1 pi^-1(x, d))) - I_i(x)) / s_I)`` over
  every pixel ``x`` of every ordered edge ``(i, j)``;
- depth: ``conf * rho((D_pred - D_obs) / s_D)`` plus ``lambda_vote`` times a
  soft vote loss whose correspondences are frozen per solve.

``rho`` is the Huber penalty (``r^2`` inside the knee). Depths live at a
reduced resolution: low-res pixel ``(u', v')`` is full-res ``(s u', s v')``.
Updates are left-multiplicative ``T <- exp(xi) T`` with ``xi = (rho, omega)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geometry import (
    CameraIntrinsics,
    DepthMap,
    InvalidInputError,
    PoseSE3,
    bilinear_sample_array,
    bilinear_with_gradient,
    pixel_grid,
    se3_exp,
)
from .voting import VotingThresholds

logger = logging.getLogger(__name__)


class DegenerateGeometryError(RuntimeError):
    """The pose normal equations are singular."""

    def __init__(self, message: str, frame_ids=()):
        super().__init__(f"{message} (frames {list(frame_ids)})")
        self.frame_ids = list(frame_ids)


# --- robust loss -------------------------------------------------------------


@dataclass(frozen=True)
class RobustLossConfig:
    kind: str = "huber"  # or "quadratic"
    delta: float = 1.345
    photo_scale_floor: float = 0.01
    depth_scale_floor: float = 0.002

    def __post_init__(self):
        if self.kind not in ("huber", "quadratic"):
            raise InvalidInputError(f"unknown robust loss {self.kind!r}")
        if self.delta <= 0:
            raise InvalidInputError("Huber delta must be positive")


def robust_rho(r, loss: RobustLossConfig):
    """Penalty on an already-normalized residual; C1 at the knee."""
    r = np.asarray(r, dtype=np.float64)
    if loss.kind == "quadratic":
        return r * r
    a = np.abs(r)
    k = loss.delta
    return np.where(a <= k, r * r, 2 * k * a - k * k)


def robust_rho_prime(r, loss: RobustLossConfig):
    r = np.asarray(r, dtype=np.float64)
    if loss.kind == "quadratic":
        return 2 * r
    k = loss.delta
    return np.where(np.abs(r) <= k, 2 * r, 2 * k * np.sign(r))


def robust_weight(r_scaled, loss: RobustLossConfig):
    """IRLS weight ``min(1, delta / |r|)`` in (0, 1]."""
    if loss.kind == "quadratic":
        return np.ones_like(np.asarray(r_scaled, dtype=np.float64))
    a = np.abs(np.asarray(r_scaled, dtype=np.float64))
    with np.errstate(divide="ignore", over="ignore"):
        return np.minimum(1.0, loss.delta / a)


def confidence_weight(confidence, residual_scaled, loss: RobustLossConfig = RobustLossConfig()):
    """Per-pixel weight: multi-view confidence times the robust IRLS weight."""
    return np.asarray(confidence, dtype=np.float64) * robust_weight(residual_scaled, loss)


def mad_scale(residuals: np.ndarray, floor: float) -> float:
    """Robust standard deviation ``1.4826 * median|r|``, never below ``floor``."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        return floor
    return max(floor, 1.4826 * float(np.median(np.abs(r))))


# --- configuration and window --------------------------------------------------


@dataclass(frozen=True)
class BAConfig:
    lambda_vote: float = 0.1
    lambda_nerf: float = 0.05
    max_iterations: int = 30
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    tol_energy: float = 1e-10
    tol_pose: float = 1e-8
    loss: RobustLossConfig = RobustLossConfig()
    tau_soft: float = 0.01
    soft_eps: float = 1e-3
    occlusion_tol: float = 0.05
    nerf_fd_step: float = 1e-4

    def __post_init__(self):
        if self.lambda_vote < 0 or self.lambda_nerf < 0:
            raise InvalidInputError("energy weights must be non-negative")
        if self.tol_energy <= 0 or self.tol_pose <= 0:
            raise InvalidInputError("tolerances must be positive")


@dataclass
class WindowFrame:
    """One frame of a window: full-res gray image, pose, and low-res depths."""

    frame_id: int
    image: np.ndarray
    pose: PoseSE3
    d_pred: np.ndarray
    d_obs: DepthMap
    confidence: np.ndarray

    @property
    def omega(self) -> np.ndarray:
        return self.d_pred > 0


@dataclass
class OptimizationWindow:
    frames: list
    K: CameraIntrinsics
    stride: int = 4
    edges: list = field(default_factory=list)
    fixed: set = field(default_factory=lambda: {0})

    def __post_init__(self):
        n = len(self.frames)
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise InvalidInputError(f"edge ({i}, {j}) refers to a frame outside the window")
        for f in self.frames:
            if f.d_pred.shape != f.confidence.shape or f.d_pred.shape != f.d_obs.shape:
                raise InvalidInputError("D_pred, D_obs and confidence must share one resolution")

    @property
    def K_low(self) -> CameraIntrinsics:
        return self.K.scaled(self.stride)

    @property
    def ids(self) -> list:
        return [f.frame_id for f in self.frames]

    def poses(self) -> list:
        return [f.pose for f in self.frames]

    def copy(self) -> OptimizationWindow:
        frames = [replace(f, d_pred=f.d_pred.copy()) for f in self.frames]
        return OptimizationWindow(frames, self.K, self.stride, list(self.edges), set(self.fixed))

    def with_state(self, poses, depths) -> OptimizationWindow:
        frames = [replace(f, pose=p, d_pred=d) for f, p, d in zip(self.frames, poses, depths)]
        return OptimizationWindow(frames, self.K, self.stride, list(self.edges), set(self.fixed))


def seed_depth(d_obs: DepthMap, confidence: np.ndarray) -> np.ndarray:
    """Initial D_pred: observed depth, with zero-confidence pixels copied from
    the nearest confident pixel. Pixels without any observation stay 0."""
    trusted = d_obs.valid & (confidence > 0)
    out = np.where(d_obs.valid, d_obs.values, 0.0)
    if not trusted.any():
        return out
    _, (iy, ix) = ndimage.distance_transform_edt(~trusted, return_indices=True)
    fill = d_obs.values[iy, ix]
    return np.where(d_obs.valid & ~trusted, fill, out)


def all_pairs(n: int, max_gap: int | None = None) -> list:
    return [(i, j) for i in range(n) for j in range(n) if i != j and (max_gap is None or abs(i - j) <= max_gap)]


def make_window(
    images,
    poses,
    depths,
    confidences,
    K: CameraIntrinsics,
    stride: int = 4,
    frame_ids=None,
    edges=None,
    d_pred=None,
    blur_sigma: float = 0.0,
) -> OptimizationWindow:
    """Build a window from full-resolution inputs.

    ``depths`` and ``confidences`` are full-res and get stride-subsampled so
    low-res pixel ``(u', v')`` coincides with full-res ``(s u', s v')``.
    Gray images are Gaussian-smoothed by ``blur_sigma`` pixels, which tames
    aliasing and widens the basin of the photometric term.
    """
    n = len(images)
    if n < 2:
        raise InvalidInputError("a window needs at least two frames")
    frame_ids = list(range(n)) if frame_ids is None else list(frame_ids)
    H, W = K.height // stride, K.width // stride
    frames = []
    for k in range(n):
        img = images[k]
        if img.ndim == 3:
            img = img @ np.array([0.299, 0.587, 0.114])
        if blur_sigma > 0:
            img = ndimage.gaussian_filter(img, blur_sigma, mode="nearest")
        dm = depths[k]
        obs = DepthMap(dm.values[::stride, ::stride][:H, :W], dm.valid[::stride, ::stride][:H, :W], frame_ids[k])
        conf = np.asarray(confidences[k], dtype=np.float64)[::stride, ::stride][:H, :W]
        conf = np.where(obs.valid, conf, 0.0)
        pred = seed_depth(obs, conf) if d_pred is None else np.asarray(d_pred[k], dtype=np.float64)
        frames.append(WindowFrame(frame_ids[k], np.asarray(img, dtype=np.float64), poses[k], pred, obs, conf))
    return OptimizationWindow(frames, K, stride, all_pairs(n) if edges is None else list(edges))


def upsample_depth(d_low: np.ndarray, stride: int, shape) -> DepthMap:
    """Bilinear upsampling of a low-res depth map to full resolution."""
    H, W = shape
    v, u = np.mgrid[0:H, 0:W] / float(stride)
    vals, ok = bilinear_sample_array(d_low, d_low > 0, u, v)
    return DepthMap(vals, ok)


# --- geometry of one edge ----------------------------------------------------


def _skew_rows(p):
    """Rows of ``[I | -[p]x]`` for an array of points p (n, 3): shape (n, 3, 6)."""
    n = p.shape[0]
    J = np.zeros((n, 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    # -[p]x
    J[:, 0, 4] = z
    J[:, 0, 5] = -y
    J[:, 1, 3] = -z
    J[:, 1, 5] = x
    J[:, 2, 3] = y
    J[:, 2, 4] = -x
    return J


@dataclass
class _EdgeGeom:
    pix: np.ndarray  # flat low-res pixel indices in frame i
    Xi: np.ndarray
    Xj: np.ndarray
    ray: np.ndarray
    Rji: np.ndarray
    uj: np.ndarray
    vj: np.ndarray
    front: np.ndarray


def _edge_geometry(win: OptimizationWindow, i: int, j: int, pix=None) -> _EdgeGeom:
    fi, fj = win.frames[i], win.frames[j]
    K = win.K
    s = win.stride
    h, w = fi.d_pred.shape
    if pix is None:
        pix = np.flatnonzero(fi.omega.reshape(-1))
    v0, u0 = np.divmod(pix, w)
    u, v = s * u0.astype(np.float64), s * v0.astype(np.float64)
    d = fi.d_pred.reshape(-1)[pix]
    ray = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=1)
    Xi = ray * d[:, None]
    Ri, ti = fi.pose.rotation, fi.pose.translation
    Rj, tj = fj.pose.rotation, fj.pose.translation
    Rji = Rj @ Ri.T
    tji = tj - Rji @ ti
    Xj = Xi @ Rji.T + tji
    front = Xj[:, 2] > 1e-6
    zs = np.where(front, Xj[:, 2], 1.0)
    uj = K.fx * Xj[:, 0] / zs + K.cx
    vj = K.fy * Xj[:, 1] / zs + K.cy
    return _EdgeGeom(pix, Xi, Xj, ray, Rji, uj, vj, front)


def _proj_jac(Xj, K: CameraIntrinsics):
    """d(u, v)/dX for points in camera j: (n, 2, 3)."""
    x, y, z = Xj[:, 0], Xj[:, 1], Xj[:, 2]
    J = np.zeros((len(z), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / (z * z)
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / (z * z)
    return J


# --- frozen correspondences ------------------------------------------------------


@dataclass
class Correspondences:
    """Per-solve frozen data: photometric visibility and vote lookups.

    ``visible[(i, j)]`` flags pixels of frame i not occluded in frame j.
    ``vote[(i, j)]`` holds ``(pix, d_src)``: low-res pixels of i that landed
    in j and the depth of j sampled there.
    """

    visible: dict
    vote: dict


def depth_edges(d: np.ndarray, tol: float = 0.05) -> np.ndarray:
    """Pixels next to a depth discontinuity or an invalid 4-neighbor."""
    valid = d > 0
    edge = ~valid
    pad = np.pad(d, 1, mode="edge")
    pv = np.pad(valid, 1, mode="constant", constant_values=True)
    H, W = d.shape
    for dy, dx in ((0, 1), (2, 1), (1, 0), (1, 2)):
        nb = pad[dy : dy + H, dx : dx + W]
        nv = pv[dy : dy + H, dx : dx + W]
        with np.errstate(divide="ignore", invalid="ignore"):
            jump = np.abs(nb - d) > tol * np.where(valid, d, 1.0)
        edge |= valid & (~nv | jump)
    return edge


def freeze_correspondences(win: OptimizationWindow, occlusion_tol: float = 0.05, margin: float = 2.0) -> Correspondences:
    """Freeze which photometric residuals exist and where votes look up depth.

    A photometric residual is kept when its pixel is away from depth
    discontinuities, its projection lands at least ``margin`` pixels inside
    the target image on a smooth patch of the target's depth, and the point is
    not behind the target's surface by more than ``occlusion_tol``. Freezing this set means small pose changes
    cannot toggle residuals in and out of the energy.
    """
    K_low = win.K_low
    s = win.stride
    edges = [depth_edges(f.d_pred, occlusion_tol) for f in win.frames]
    visible, vote = {}, {}
    for i, j in win.edges:
        g = _edge_geometry(win, i, j)
        fj = win.frames[j]
        d_j, ok = bilinear_sample_array(fj.d_pred, fj.omega, g.uj / s, g.vj / s)
        ok &= g.front
        _, smooth = bilinear_sample_array(fj.d_pred, fj.omega & ~edges[j], g.uj / s, g.vj / s)
        z = g.Xj[:, 2]
        H, W = fj.image.shape
        vis = ok & smooth & ~edges[i].reshape(-1)[g.pix]
        vis &= (g.uj >= margin) & (g.uj <= W - 1 - margin) & (g.vj >= margin) & (g.vj <= H - 1 - margin)
        zs = np.where(ok, z, 1.0)
        vis &= zs <= d_j * (1 + occlusion_tol)  # occluded in j
        visible[(i, j)] = vis
        inside = ok & (g.uj / s <= K_low.width - 1) & (g.vj / s <= K_low.height - 1)
        vote[(i, j)] = (g.pix[inside], d_j[inside])
    return Correspondences(visible, vote)


# --- energies ---------------------------------------------------------------------


@dataclass
class _Terms:
    """Linearized residuals of one edge or frame."""

    r: np.ndarray  # normalized residuals
    frame_i: int
    pix: np.ndarray
    J_d: np.ndarray  # d r / d depth(pix)
    frame_j: int | None = None
    J_i: np.ndarray | None = None  # (n, 6)
    J_j: np.ndarray | None = None
    weight: np.ndarray | None = None  # multiplicative weights (confidence)


def _photo_terms(win, i, j, scale, corr=None) -> _Terms:
    fi, fj = win.frames[i], win.frames[j]
    g = _edge_geometry(win, i, j)
    s = win.stride
    H, W = fj.image.shape
    val, du, dv, inside = bilinear_with_gradient(fj.image, g.uj, g.vj)
    keep = g.front & inside
    if corr is not None and (i, j) in corr.visible:
        keep &= corr.visible[(i, j)]
    h, w = fi.d_pred.shape
    v0, u0 = np.divmod(g.pix, w)
    ref = fi.image[s * v0, s * u0]
    r = (val - ref) / scale

    Jp = _proj_jac(np.where(keep[:, None], g.Xj, np.array([0.0, 0.0, 1.0])), win.K)
    gI = np.stack([du, dv], axis=1)[:, None, :]  # (n, 1, 2)
    gX = (gI @ Jp)[:, 0, :] / scale  # dr/dXj (n, 3)
    J_j = np.einsum("na,nab->nb", gX, _skew_rows(g.Xj))
    J_i = -np.einsum("na,nab->nb", gX @ g.Rji, _skew_rows(g.Xi))
    J_d = np.einsum("na,na->n", gX, g.ray @ g.Rji.T)
    k = keep
    return _Terms(r[k], i, g.pix[k], J_d[k], j, J_i[k], J_j[k])


def _depth_terms(win, i, scale) -> _Terms:
    f = win.frames[i]
    pix = np.flatnonzero((f.omega & f.d_obs.valid).reshape(-1))
    r = (f.d_pred.reshape(-1)[pix] - f.d_obs.values.reshape(-1)[pix]) / scale
    return _Terms(r, i, pix, np.full(len(pix), 1.0 / scale), weight=f.confidence.reshape(-1)[pix])


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_vote_loss(win: OptimizationWindow, corr: Correspondences, thr: VotingThresholds, tau_soft=0.01, eps=1e-3):
    """Soft vote loss summed over frames, with gradients.

    Each frozen correspondence contributes ``s((tau_depth - sqrt(e^2 + eps^2)) / tau_soft)``
    with ``e = (d_src - z_j) / z_j``; those soft votes enter the per-frame loss
    ``1 - mean s((V - m_vote) / tau_m)``. Returns ``(L, grad_depth list, grad_pose)``.
    """
    n = len(win.frames)
    total = 0.0
    g_depth = [np.zeros(f.d_pred.size) for f in win.frames]
    g_pose = np.zeros((n, 6))
    for i, f in enumerate(win.frames):
        om = f.omega.reshape(-1)
        n_om = int(om.sum())
        if n_om == 0:
            continue
        V = np.zeros(f.d_pred.size)
        parts = []
        for (a, j), (pix, d_src) in corr.vote.items():
            if a != i or len(pix) == 0:
                continue
            pix_ok = pix[om[pix]]
            d_src = d_src[om[pix]]
            g = _edge_geometry(win, i, j, pix_ok)
            z = g.Xj[:, 2]
            e = (d_src - z) / z
            a_ = np.sqrt(e * e + eps * eps)
            c = _logistic((thr.tau_depth - a_) / tau_soft)
            V[pix_ok] += c
            # d c / d z
            dc_dz = c * (1 - c) * (-1.0 / tau_soft) * (e / a_) * (-d_src / (z * z))
            parts.append((j, pix_ok, g, dc_dz))
        x = (V[om] - thr.m_vote) / thr.tau_m
        sv = _logistic(x)
        total += 1.0 - sv.mean()
        dL_dV = np.zeros(f.d_pred.size)
        dL_dV[om] = -(sv * (1 - sv)) / thr.tau_m / n_om
        for j, pix_ok, g, dc_dz in parts:
            k = dL_dV[pix_ok] * dc_dz  # dL/dz per correspondence
            dz_dd = (g.ray @ g.Rji.T)[:, 2]
            np.add.at(g_depth[i], pix_ok, k * dz_dd)
            g_pose[j] += k @ _skew_rows(g.Xj)[:, 2, :]
            g_pose[i] -= k @ (_skew_rows(g.Xi).transpose(0, 2, 1) @ g.Rji[2])
    return total, [gd.reshape(f.d_pred.shape) for gd, f in zip(g_depth, win.frames)], g_pose


@dataclass
class EnergyBreakdown:
    e_photo: float
    e_depth: float
    e_nerf: float = 0.0
    lambda_nerf: float = 0.0
    l_vote: float = 0.0

    @property
    def e_total(self) -> float:
        return self.e_photo + self.e_depth + self.lambda_nerf * self.e_nerf

    def as_dict(self) -> dict:
        return {
            "e_photo": self.e_photo,
            "e_depth": self.e_depth,
            "e_nerf": self.e_nerf,
            "e_total": self.e_total,
            "l_vote": self.l_vote,
        }


def _accumulate_grad(terms: _Terms, loss, win, g_depth, g_pose):
    rp = robust_rho_prime(terms.r, loss)
    if terms.weight is not None:
        rp = rp * terms.weight
    np.add.at(g_depth[terms.frame_i], terms.pix, rp * terms.J_d)
    if terms.J_i is not None:
        g_pose[terms.frame_i] += rp @ terms.J_i
        g_pose[terms.frame_j] += rp @ terms.J_j


def photometric_energy(win: OptimizationWindow, loss: RobustLossConfig = RobustLossConfig(), scale: float = 1.0, corr=None):
    """``(E_photo, grad w.r.t. each D_pred, grad w.r.t. each pose twist (n, 6))``."""
    n = len(win.frames)
    g_depth = [np.zeros(f.d_pred.size) for f in win.frames]
    g_pose = np.zeros((n, 6))
    E = 0.0
    for i, j in win.edges:
        if i == j:
            continue
        t = _photo_terms(win, i, j, scale, corr)
        E += float(robust_rho(t.r, loss).sum())
        _accumulate_grad(t, loss, win, g_depth, g_pose)
    return E, [g.reshape(f.d_pred.shape) for g, f in zip(g_depth, win.frames)], g_pose


def depth_energy(
    win: OptimizationWindow,
    thr: VotingThresholds = VotingThresholds(),
    lambda_vote: float = 0.1,
    loss: RobustLossConfig = RobustLossConfig(),
    scale: float = 1.0,
    corr: Correspondences | None = None,
    tau_soft: float = 0.01,
    eps: float = 1e-3,
):
    """``sum conf * rho((D_pred - D_obs)/scale) + lambda_vote * L_vote`` with gradients.

    Returns ``(E_depth, grad_depth list, grad_pose, L_vote)``. The vote term is
    skipped when ``lambda_vote`` is 0 or no correspondences are given.
    """
    n = len(win.frames)
    g_depth = [np.zeros(f.d_pred.size) for f in win.frames]
    g_pose = np.zeros((n, 6))
    E = 0.0
    for i in range(n):
        t = _depth_terms(win, i, scale)
        E += float((t.weight * robust_rho(t.r, loss)).sum())
        _accumulate_grad(t, loss, win, g_depth, g_pose)
    g_depth = [g.reshape(f.d_pred.shape) for g, f in zip(g_depth, win.frames)]
    L = 0.0
    if lambda_vote > 0 and corr is not None:
        L, gd, gp = soft_vote_loss(win, corr, thr, tau_soft, eps)
        E += lambda_vote * L
        g_depth = [a + lambda_vote * b for a, b in zip(g_depth, gd)]
        g_pose = g_pose + lambda_vote * gp
    return E, g_depth, g_pose, L


# --- solver --------------------------------------------------------------------------


@dataclass
class BAResult:
    window: OptimizationWindow
    history: list  # EnergyBreakdown per accepted iterate, starting with the initial state
    iterations: int
    converged: bool
    increments: list  # max pose-increment norm per accepted step
    photo_scale: float
    depth_scale: float


class _Problem:
    """Energy evaluation and normal-equation assembly for one solve."""

    def __init__(self, win, cfg: BAConfig, thr: VotingThresholds, nerf=None):
        self.cfg = cfg
        self.thr = thr
        self.nerf = nerf  # callable(pose, frame_index) -> per-pixel residual vector, or None
        self.corr = freeze_correspondences(win, cfg.occlusion_tol)
        photo_r = np.concatenate(
            [_photo_terms(win, i, j, 1.0, self.corr).r for i, j in win.edges] or [np.zeros(0)]
        )
        depth_r = []
        for i, f in enumerate(win.frames):
            t = _depth_terms(win, i, 1.0)
            depth_r.append(t.r[t.weight > 0])
        self.s_photo = mad_scale(photo_r, cfg.loss.photo_scale_floor)
        self.s_depth = mad_scale(np.concatenate(depth_r), cfg.loss.depth_scale_floor)
        self.s_nerf = 1.0
        if nerf is not None and cfg.lambda_nerf > 0:
            r0 = np.concatenate([nerf(f.pose, k) for k, f in enumerate(win.frames)])
            self.s_nerf = mad_scale(r0, cfg.loss.photo_scale_floor)

    def nerf_r(self, pose, k):
        return self.nerf(pose, k) / self.s_nerf

    def energy(self, win) -> EnergyBreakdown:
        e_p, _, _ = photometric_energy(win, self.cfg.loss, self.s_photo, self.corr)
        t_d = [_depth_terms(win, i, self.s_depth) for i in range(len(win.frames))]
        e_d = float(sum((t.weight * robust_rho(t.r, self.cfg.loss)).sum() for t in t_d))
        L = 0.0
        if self.cfg.lambda_vote > 0:
            L, _, _ = soft_vote_loss(win, self.corr, self.thr, self.cfg.tau_soft, self.cfg.soft_eps)
            e_d += self.cfg.lambda_vote * L
        e_n = 0.0
        lam = 0.0
        if self.nerf is not None and self.cfg.lambda_nerf > 0:
            lam = self.cfg.lambda_nerf
            e_n = float(sum(robust_rho(self.nerf_r(f.pose, k), self.cfg.loss).sum() for k, f in enumerate(win.frames)))
        return EnergyBreakdown(e_p, e_d, e_n, lam, L)

    def assemble(self, win):
        """Gauss-Newton blocks: pose Hessian, pose-depth coupling, depth diagonal."""
        n = len(win.frames)
        sizes = [f.d_pred.size for f in win.frames]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        N = int(offs[-1])
        Hpp = np.zeros((6 * n, 6 * n))
        bp = np.zeros(6 * n)
        Hdd = np.zeros(N)
        bd = np.zeros(N)
        G = np.zeros((N, 6 * n))  # rows: J_d * w * J_pose
        loss = self.cfg.loss

        def add(t: _Terms):
            w = robust_weight(t.r, loss)
            if t.weight is not None:
                w = w * t.weight
            idx = offs[t.frame_i] + t.pix
            np.add.at(Hdd, idx, w * t.J_d * t.J_d)
            np.add.at(bd, idx, w * t.J_d * t.r)
            if t.J_i is None:
                return
            a, b = 6 * t.frame_i, 6 * t.frame_j
            Ji = t.J_i * w[:, None]
            Jj = t.J_j * w[:, None]
            Hpp[a : a + 6, a : a + 6] += Ji.T @ t.J_i
            Hpp[b : b + 6, b : b + 6] += Jj.T @ t.J_j
            Hpp[a : a + 6, b : b + 6] += Ji.T @ t.J_j
            Hpp[b : b + 6, a : a + 6] += Jj.T @ t.J_i
            bp[a : a + 6] += Ji.T @ t.r
            bp[b : b + 6] += Jj.T @ t.r
            np.add.at(G, (idx, slice(a, a + 6)), Ji * t.J_d[:, None])
            np.add.at(G, (idx, slice(b, b + 6)), Jj * t.J_d[:, None])

        for i, j in win.edges:
            if i != j:
                add(_photo_terms(win, i, j, self.s_photo, self.corr))
        for i in range(n):
            add(_depth_terms(win, i, self.s_depth))

        if self.cfg.lambda_vote > 0:
            _, gd, gp = soft_vote_loss(win, self.corr, self.thr, self.cfg.tau_soft, self.cfg.soft_eps)
            # energy is sum rho ~ r^2, so its gradient is 2 J^T W r: fold the
            # vote gradient in at half weight
            bd += 0.5 * self.cfg.lambda_vote * np.concatenate([g.reshape(-1) for g in gd])
            bp += 0.5 * self.cfg.lambda_vote * gp.reshape(-1)

        if self.nerf is not None and self.cfg.lambda_nerf > 0:
            lam = self.cfg.lambda_nerf
            h = self.cfg.nerf_fd_step
            for k, f in enumerate(win.frames):
                if k in win.fixed:
                    continue
                r0 = self.nerf_r(f.pose, k)
                J = np.zeros((len(r0), 6))
                for c in range(6):
                    e = np.zeros(6)
                    e[c] = h
                    rp = self.nerf_r(f.pose.retract(e), k)
                    rm = self.nerf_r(f.pose.retract(-e), k)
                    J[:, c] = (rp - rm) / (2 * h)
                w = robust_weight(r0, loss) * lam
                a = 6 * k
                Hpp[a : a + 6, a : a + 6] += (J * w[:, None]).T @ J
                bp[a : a + 6] += (J * w[:, None]).T @ r0
        return Hpp, bp, Hdd, bd, G, offs

    def solve_step(self, win, system, damping):
        Hpp, bp, Hdd, bd, G, offs = system
        n = len(win.frames)
        free = [k for k in range(n) if k not in win.fixed]
        cols = np.concatenate([np.arange(6 * k, 6 * k + 6) for k in free])
        Hd = Hdd + damping * np.maximum(Hdd, 1e-12)
        act = Hdd > 0
        inv = np.where(act, 1.0 / np.where(act, Hd, 1.0), 0.0)

        Gf = G[:, cols]
        S = Hpp[np.ix_(cols, cols)] - (Gf * inv[:, None]).T @ Gf
        S = 0.5 * (S + S.T)
        S += damping * np.diag(np.maximum(np.diag(Hpp)[cols], 1e-12))
        rhs = -(bp[cols] - Gf.T @ (inv * bd))
        diag = np.diag(Hpp)[cols].reshape(len(free), 6)
        dead = [win.frames[free[k]].frame_id for k in range(len(free)) if np.any(diag[k] <= 1e-12)]
        if dead:
            raise DegenerateGeometryError("pose block has no constraints", dead)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise DegenerateGeometryError("singular pose normal equations", [win.frames[k].frame_id for k in free])
        dp = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        dd = -inv * (bd + Gf @ dp)
        xi = np.zeros((n, 6))
        xi[free] = dp.reshape(len(free), 6)
        poses = [f.pose.retract(xi[k]) if k not in win.fixed else f.pose for k, f in enumerate(win.frames)]
        depths = []
        for k, f in enumerate(win.frames):
            upd = dd[offs[k] : offs[k + 1]].reshape(f.d_pred.shape)
            nd = np.where(f.omega, f.d_pred + upd, 0.0)
            # a step never turns a valid depth non-positive
            nd = np.where(f.omega, np.maximum(nd, 0.25 * f.d_pred), 0.0)
            depths.append(nd)
        return win.with_state(poses, depths), float(np.abs(xi).max())


def _solve(win: OptimizationWindow, cfg: BAConfig, thr: VotingThresholds, nerf=None) -> BAResult:
    if len(win.frames) < 2:
        raise InvalidInputError("BA needs at least two frames")
    if not win.edges:
        raise InvalidInputError("BA needs at least one edge")
    prob = _Problem(win, cfg, thr, nerf)
    cur = win.copy()
    e_cur = prob.energy(cur)
    history = [e_cur]
    increments = []
    lam = cfg.damping_init
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        system = prob.assemble(cur)
        accepted = False
        while lam < 1e12:
            cand, step = prob.solve_step(cur, system, lam)
            e_new = prob.energy(cand)
            if e_new.e_total <= e_cur.e_total + 1e-12 * max(1.0, abs(e_cur.e_total)):
                accepted = True
                break
            lam *= cfg.damping_up
        if not accepted:
            converged = True
            break
        rel = (e_cur.e_total - e_new.e_total) / max(e_cur.e_total, 1e-300)
        cur, e_cur = cand, e_new
        history.append(e_cur)
        increments.append(step)
        lam = max(lam * cfg.damping_down, 1e-12)
        logger.debug("BA it %d: E=%.6g step=%.3g", it, e_cur.e_total, step)
        if step < cfg.tol_pose or rel < cfg.tol_energy:
            converged = True
            break
    return BAResult(cur, history, it, converged, increments, prob.s_photo, prob.s_depth)


def solve_local_ba(win: OptimizationWindow, cfg: BAConfig = BAConfig(), thr: VotingThresholds = VotingThresholds()) -> BAResult:
    """Levenberg-Marquardt over pose twists and low-res depths (first frame fixed).

    Depths are eliminated with a Schur complement since their block is diagonal.
    Accepted steps never increase the energy.
    """
    return _solve(win, cfg, thr, None)


def solve_global_ba(
    win: OptimizationWindow,
    field,
    images,
    cfg: BAConfig = BAConfig(),
    thr: VotingThresholds = VotingThresholds(),
    render_cfg=None,
) -> BAResult:
    """Joint BA over all frames with the radiance-field photometric term.

    The field is held fixed. Its per-pixel L1 residuals at 1/8 scale are
    normalized by their MAD at the start of the solve and differentiated
    w.r.t. each pose by central differences over the six tangent
    coordinates (12 renders per frame per iteration).
    """
    from .field import RenderConfig, nerf_residuals

    if field is None or not getattr(field, "fitted", False):
        raise InvalidInputError("global BA needs a fitted field")
    if cfg.lambda_nerf == 0:
        return _solve(win, cfg, thr, None)
    render_cfg = render_cfg or RenderConfig()
    targets = list(images)

    def nerf(pose, k):
        return nerf_residuals(field, pose, win.K, targets[k], render_cfg)

    return _solve(win, cfg, thr, nerf)
