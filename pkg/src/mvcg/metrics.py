"""Trajectory, depth, mesh and image quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DepthMap, InvalidInputError, PoseSE3, rotation_angle_deg


class InsufficientDataError(ValueError):
    """Too few correspondences / samples to compute a metric."""


@dataclass
class Trajectory:
    """Frame ids with their world-to-camera poses."""

    ids: list
    poses: list

    def __post_init__(self):
        if len(self.ids) != len(self.poses):
            raise InvalidInputError("ids and poses differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise InvalidInputError("frame ids must be unique")

    @classmethod
    def from_poses(cls, poses) -> Trajectory:
        return cls(list(range(len(poses))), list(poses))

    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.poses])

    def as_dict(self) -> dict:
        return dict(zip(self.ids, self.poses))


def _as_traj(t) -> Trajectory:
    return t if isinstance(t, Trajectory) else Trajectory.from_poses(t)


def _matched(est, gt):
    est, gt = _as_traj(est), _as_traj(gt)
    g = gt.as_dict()
    ids = [i for i in est.ids if i in g]
    e = est.as_dict()
    return [e[i] for i in ids], [g[i] for i in ids]


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """Least-squares ``s, R, t`` with ``dst ~ s R src + t`` (Umeyama 1991)."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    s = 1.0
    if with_scale:
        var = (xs**2).sum() / len(src)
        s = float(np.trace(np.diag(S) @ D) / var) if var > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate(estimated, gt, alignment: str = "rigid") -> float:
    """RMSE of camera-center residuals after closed-form alignment, in meters."""
    e, g = _matched(estimated, gt)
    if len(e) < 3:
        raise InsufficientDataError("ATE alignment needs at least 3 matched frames")
    if alignment not in ("rigid", "similarity"):
        raise InvalidInputError(f"unknown alignment {alignment!r}")
    src = np.array([p.center for p in e])
    dst = np.array([p.center for p in g])
    s, R, t = umeyama(src, dst, with_scale=alignment == "similarity")
    res = dst - (s * src @ R.T + t)
    return float(np.sqrt((res**2).sum(1).mean()))


def rpe(estimated, gt, delta: int = 1) -> tuple[float, float]:
    """Relative pose error over frame gap ``delta``.

    Returns ``(RTE, RRE)``: RMSE of relative translation error norms (m) and of
    relative rotation error angles (degrees).
    """
    e, g = _matched(estimated, gt)
    if len(e) < delta + 1:
        raise InsufficientDataError("not enough frames for the requested gap")
    te, re = [], []
    for i in range(len(e) - delta):
        # camera-to-world motion between the two frames
        rel_g = g[i] @ g[i + delta].inverse()
        rel_e = e[i] @ e[i + delta].inverse()
        err = rel_g.inverse() @ rel_e
        te.append(np.linalg.norm(err.translation))
        re.append(rotation_angle_deg(err.rotation))
    te, re = np.array(te), np.array(re)
    return float(np.sqrt((te**2).mean())), float(np.sqrt((re**2).mean()))


@dataclass
class DepthErrorStats:
    absrel: float
    delta_fraction: float
    count: int
    acc_1sigma: float
    scale: float = 1.0


def depth_errors(
    pred: DepthMap,
    gt: DepthMap,
    delta: float = 0.05,
    align: str | None = "median",
    symmetric: bool = True,
) -> DepthErrorStats:
    """absrel and delta-accuracy over pixels valid in both maps.

    With ``align="median"`` the prediction is first scaled by
    ``median(gt) / median(pred)``. ``symmetric`` selects the
    ``max(p/g, g/p) - 1 < delta`` form; otherwise ``|p - g| / g < delta``.
    """
    both = pred.valid & gt.valid
    if not both.any():
        raise InsufficientDataError("prediction and ground truth do not overlap")
    p = pred.values[both]
    g = gt.values[both]
    scale = 1.0
    if align == "median":
        scale = float(np.median(g) / np.median(p))
        p = p * scale
    elif align is not None:
        raise InvalidInputError(f"unknown alignment {align!r}")
    rel = np.abs(p - g) / g
    if symmetric:
        ok = np.maximum(p / g, g / p) - 1.0 < delta
    else:
        ok = rel < delta
    signed = p - g
    keep = np.abs(signed - signed.mean()) <= signed.std()
    acc = float(np.abs(signed[keep]).mean()) if keep.any() else 0.0
    return DepthErrorStats(float(rel.mean()), float(ok.mean()), int(both.sum()), acc, scale)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise InvalidInputError("triangle index out of range")
        if not np.isfinite(self.vertices).all():
            raise InvalidInputError("mesh vertices must be finite")

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        """Area-weighted uniform surface samples."""
        rng = np.random.default_rng(seed)
        areas = self.areas()
        idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.uniform(size=n))
        r2 = rng.uniform(size=n)
        a, b, c = (self.vertices[self.triangles[idx, k]] for k in range(3))
        return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def _closest_on_triangles(p, a, b, c):
    """Closest points on triangles ``abc`` to points ``p`` (all (n, 3))."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        out = a + ab * v[:, None] + ac * w[:, None]

        # edge regions
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        out = np.where(m[:, None], a + t[:, None] * ab, out)
        m2 = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        out = np.where(m2[:, None], a + t[:, None] * ac, out)
        m3 = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out = np.where(m3[:, None], b + t[:, None] * (c - b), out)
    # vertex regions take precedence
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    return out


class MeshDistance:
    """Point-to-surface distance queries against a fixed triangle mesh.

    Candidates are the ``k`` triangles with the nearest centroids, which is
    exact for meshes whose triangles are small relative to the query offsets
    (marching-cubes output, finely tessellated primitives).
    """

    def __init__(self, mesh: TriangleMesh, k: int = 12):
        if mesh.empty:
            raise InsufficientDataError("mesh is empty")
        self.mesh = mesh
        self.tri = mesh.vertices[mesh.triangles]
        self.tree = cKDTree(self.tri.mean(axis=1))
        self.k = min(k, len(mesh.triangles))

    def __call__(self, points: np.ndarray, chunk: int = 20000) -> np.ndarray:
        out = np.empty(len(points))
        for s in range(0, len(points), chunk):
            p = points[s : s + chunk]
            _, idx = self.tree.query(p, k=self.k)
            idx = idx.reshape(len(p), -1)
            best = np.full(len(p), np.inf)
            for j in range(idx.shape[1]):
                t = self.tri[idx[:, j]]
                q = _closest_on_triangles(p, t[:, 0], t[:, 1], t[:, 2])
                best = np.minimum(best, np.linalg.norm(p - q, axis=1))
            out[s : s + chunk] = best
        return out


@dataclass
class MeshErrorStats:
    accuracy: float
    recall: float
    f1: float
    chamfer_mm: float


def f1_score(accuracy: float, recall: float) -> float:
    return 0.0 if accuracy + recall == 0 else 2 * accuracy * recall / (accuracy + recall)


def mesh_errors(
    pred: TriangleMesh,
    gt: TriangleMesh,
    sigma_mm: float = 2.5,
    n_samples: int = 100_000,
    seed: int = 0,
    units_per_mm: float = 1e-3,
) -> MeshErrorStats:
    """Accuracy/recall/F1 (percent) at ``sigma_mm`` and Chamfer distance in mm.

    Vertices are assumed in meters unless ``units_per_mm`` says otherwise.
    """
    if pred.empty or gt.empty:
        raise InsufficientDataError("mesh_errors needs two non-empty meshes")
    sp = pred.sample(n_samples, seed)
    sg = gt.sample(n_samples, seed + 1)
    d_pg = MeshDistance(gt)(sp) / units_per_mm
    d_gp = MeshDistance(pred)(sg) / units_per_mm
    acc = 100.0 * float((d_pg < sigma_mm).mean())
    rec = 100.0 * float((d_gp < sigma_mm).mean())
    chamfer = 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))
    return MeshErrorStats(acc, rec, f1_score(acc, rec), chamfer)


PSNR_CAP = 99.0


def psnr(rendered: np.ndarray, reference: np.ndarray, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical images give the 99 dB sentinel."""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise InvalidInputError("image dimensions differ")
    mse = float(((rendered - reference) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse))


def psnr_converged(value: float, threshold: float = 35.0) -> bool:
    """Stopping rule for radiance-field fitting: stop once PSNR >= threshold."""
    return value >= threshold


def report_dict(
    ate_m=None, rte=None, rre=None, absrel=None, delta_5=None, acc=None, rec=None, f1=None, chamfer_mm=None, psnr_db=None
) -> dict:
    """Metric report with the fixed key set of the evaluation tables."""
    return {
        "ATE": ate_m,
        "RTE": rte,
        "RRE": rre,
        "absrel": absrel,
        "delta_5": delta_5,
        "acc": acc,
        "rec": rec,
        "f1": f1,
        "chamfer_mm": chamfer_mm,
        "psnr": psnr_db,
    }


def pose_errors(est: PoseSE3, gt: PoseSE3) -> tuple[float, float]:
    """Rotation (deg) and camera-center (m) error between two poses."""
    rel = est @ gt.inverse()
    return rotation_angle_deg(rel.rotation), float(np.linalg.norm(est.center - gt.center))
