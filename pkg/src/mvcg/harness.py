"""Synthetic ground-truth scenes and controlled depth corruption.

Scenes are unions of analytic primitives rendered by exact ray casting with
Lambertian shading of a solid (world-space) texture, so every view is
photometrically and geometrically consistent with every other view.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, InvalidInputError, PoseSE3, box_downsample, camera_rays, se3_exp, so3_exp

logger = logging.getLogger(__name__)


@dataclass
class Primitive:
    """``kind`` is one of ``plane`` (a disc), ``sphere`` or ``box``.

    ``size`` holds the disc radius, the sphere radius, or the box half extents.
    ``normal`` is only used by planes.
    """

    kind: str
    center: tuple
    size: tuple
    color: tuple = (0.8, 0.8, 0.8)
    texture: int = 0
    normal: tuple = (0.0, 0.0, 1.0)


@dataclass
class SceneSpec:
    primitives: list
    poses: list
    K: CameraIntrinsics
    light_dir: tuple = (0.4, -0.3, 0.85)
    background: tuple = (0.0, 0.0, 0.0)
    scale: float = 0.5

    def __post_init__(self):
        if not self.primitives:
            raise InvalidInputError("scene needs at least one primitive")

    @property
    def n_views(self) -> int:
        return len(self.poses)

    def to_dict(self) -> dict:
        return {
            "primitives": [asdict(p) for p in self.primitives],
            "poses": [p.matrix().tolist() for p in self.poses],
            "camera": self.K.to_dict(),
            "light_dir": list(self.light_dir),
            "background": list(self.background),
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        prims = []
        for p in d["primitives"]:
            p = dict(p)
            for k in ("center", "size", "color", "normal"):
                p[k] = tuple(p[k])
            prims.append(Primitive(**p))
        return cls(
            primitives=prims,
            poses=[PoseSE3.from_matrix(np.array(m)) for m in d["poses"]],
            K=CameraIntrinsics(**d["camera"]),
            light_dir=tuple(d["light_dir"]),
            background=tuple(d["background"]),
            scale=float(d["scale"]),
        )


@dataclass
class ArtifactSpec:
    floater_count: int = 0
    floater_radius_px: float = 6.0
    floater_offset: float = 0.25
    fog_amplitude: float = 0.0
    fog_frequency: float = 1.5
    stack_scale_std: float = 0.0
    stack_bias_std: float = 0.0
    hole_fraction: float = 0.0
    hole_size_px: int = 4
    noise_std: float = 0.0

    def __post_init__(self):
        mags = [
            self.floater_count,
            self.floater_radius_px,
            self.floater_offset,
            self.fog_amplitude,
            self.stack_scale_std,
            self.stack_bias_std,
            self.noise_std,
        ]
        if min(mags) < 0:
            raise InvalidInputError("artifact magnitudes must be non-negative")
        if not 0 <= self.hole_fraction < 1:
            raise InvalidInputError("hole fraction must lie in [0, 1)")


@dataclass
class ArtifactMasks:
    """Per-channel labels of corrupted pixels.

    ``noise`` flags every pixel touched by i.i.d. noise and is left out of
    :attr:`combined`, which lists the structured corruptions.
    """

    floater: np.ndarray
    fog: np.ndarray
    stacking: np.ndarray
    hole: np.ndarray
    noise: np.ndarray
    stack_scale: float = 1.0
    stack_bias: float = 0.0

    @property
    def combined(self) -> np.ndarray:
        return self.floater | self.fog | self.stacking | self.hole


# --- scenes ------------------------------------------------------------------


def orbit_poses(
    n: int,
    radius: float = 1.0,
    elevation_deg: float = 35.0,
    target=(0.0, 0.0, 0.05),
    phase_deg: float = 0.0,
) -> list[PoseSE3]:
    target = np.asarray(target, dtype=float)
    el = np.radians(elevation_deg)
    poses = []
    for k in range(n):
        az = np.radians(phase_deg) + 2 * np.pi * k / n
        eye = target + radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        poses.append(PoseSE3.look_at(eye, target))
    return poses


def default_intrinsics(width: int = 160, height: int = 120, focal: float = 200.0) -> CameraIntrinsics:
    return CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def tabletop_scene(
    n_views: int = 16,
    K: CameraIntrinsics | None = None,
    radius: float = 1.0,
    elevation_deg: float = 45.0,
    variant: int = 0,
    table_radius: float = 0.6,
) -> SceneSpec:
    """Default harness scene: a textured disc table holding a sphere and a box.

    ``variant`` shifts the objects and the orbit phase to obtain distinct scenes.
    """
    K = K or default_intrinsics()
    rng = np.random.default_rng(1000 + variant)
    jitter = rng.uniform(-0.04, 0.04, size=4) if variant else np.zeros(4)
    prims = [
        Primitive("plane", (0.0, 0.0, 0.0), (table_radius,), (0.85, 0.75, 0.6), 0),
        Primitive("sphere", (0.12 + jitter[0], 0.07 + jitter[1], 0.08), (0.08,), (0.3, 0.6, 0.9), 1),
        Primitive("box", (-0.12 + jitter[2], -0.10 + jitter[3], 0.04), (0.07, 0.05, 0.04), (0.9, 0.4, 0.3), 2),
    ]
    poses = orbit_poses(n_views, radius, elevation_deg, phase_deg=7.0 * variant)
    return SceneSpec(prims, poses, K)


def sphere_scene(n_views: int = 12, K: CameraIntrinsics | None = None, radius: float = 1.0) -> SceneSpec:
    """A single textured sphere seen from an orbit."""
    K = K or default_intrinsics()
    prims = [Primitive("sphere", (0.0, 0.0, 0.0), (0.2,), (0.9, 0.7, 0.4), 3)]
    poses = orbit_poses(n_views, radius, 20.0, target=(0.0, 0.0, 0.0))
    return SceneSpec(prims, poses, K)


def plane_scene(distance: float = 2.0, n_views: int = 3, baseline: float = 0.1, K=None, texture: int = 0) -> SceneSpec:
    """A large fronto-parallel plane ``distance`` m in front of a short camera row.

    ``texture=RAMP_TEXTURE`` gives intensity affine in the image coordinates,
    which bilinear interpolation reproduces exactly.
    """
    K = K or default_intrinsics()
    prims = [Primitive("plane", (0.0, 0.0, distance), (50.0,), (0.8, 0.8, 0.8), texture, normal=(0.0, 0.0, -1.0))]
    poses = []
    for k in range(n_views):
        x = (k - (n_views - 1) / 2.0) * baseline
        poses.append(PoseSE3(np.eye(3), -np.array([x, 0.0, 0.0])))
    return SceneSpec(prims, poses, K, light_dir=(0.0, 0.0, -1.0), scale=distance)


# --- rendering ---------------------------------------------------------------


RAMP_TEXTURE = 9


def _texture(kind: int, p: np.ndarray) -> np.ndarray:
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if kind == RAMP_TEXTURE:
        return 0.5 + 0.12 * x + 0.08 * y
    tau = np.pi  # periods below are half-wavelengths, keeping >= ~10 px per cycle
    if kind == 0:
        s = np.sin(tau * x / 0.09) * np.sin(tau * y / 0.07) + 0.5 * np.sin(tau * (x + 2 * y) / 0.13)
    elif kind == 1:
        s = np.sin(tau * (x + y) / 0.05) * np.cos(tau * z / 0.06)
    elif kind == 2:
        s = np.sin(tau * (x - z) / 0.05) + 0.6 * np.cos(tau * (y + z) / 0.07)
    else:
        s = np.sin(tau * x / 0.11) * np.sin(tau * y / 0.09) + 0.7 * np.sin(tau * (z + 0.5 * x) / 0.08)
    return 0.5 + 0.25 * np.tanh(s)


def _intersect(prim: Primitive, o: np.ndarray, d: np.ndarray):
    """Ray hits against one primitive: returns (t, normal) with t=inf on miss."""
    c = np.asarray(prim.center, dtype=float)
    n_rays = d.shape[0]
    t = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    if prim.kind == "plane":
        nrm = np.asarray(prim.normal, dtype=float)
        nrm = nrm / np.linalg.norm(nrm)
        denom = d @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            th = ((c - o) @ nrm) / denom
        hit = np.abs(denom) > 1e-12
        hit &= th > 1e-9
        pts = o + th[:, None] * d
        hit &= np.linalg.norm(np.where(hit[:, None], pts - c, 0.0), axis=1) <= prim.size[0]
        t[hit] = th[hit]
        normal[:] = nrm
    elif prim.kind == "sphere":
        r = prim.size[0]
        oc = o - c
        b = d @ oc
        disc = b * b - (oc @ oc - r * r)
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        th = np.where(t0 > 1e-9, t0, t1)
        hit &= th > 1e-9
        t[hit] = th[hit]
        pts = o + np.where(hit, th, 0.0)[:, None] * d
        normal = (pts - c) / r
    elif prim.kind == "box":
        h = np.asarray(prim.size, dtype=float)
        lo, hi = c - h, c + h
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        tmin = np.nan_to_num(tmin, nan=-np.inf)
        tmax = np.nan_to_num(tmax, nan=np.inf)
        t_enter = tmin.max(axis=1)
        t_exit = tmax.min(axis=1)
        hit = (t_enter <= t_exit) & (t_enter > 1e-9)
        t[hit] = t_enter[hit]
        axis = tmin.argmax(axis=1)
        sign = -np.sign(d[np.arange(n_rays), axis])
        normal[np.arange(n_rays), axis] = sign
    else:
        raise InvalidInputError(f"unknown primitive kind {prim.kind!r}")
    return t, normal


def cast_rays(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Closest hit over all primitives. Returns (t, normal, prim_index or -1)."""
    best_t = np.full(dirs.shape[0], np.inf)
    best_n = np.zeros_like(dirs)
    best_i = np.full(dirs.shape[0], -1)
    for i, prim in enumerate(scene.primitives):
        t, nrm = _intersect(prim, origin, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_n[closer] = nrm[closer]
        best_i[closer] = i
    return best_t, best_n, best_i


def shade(scene: SceneSpec, points: np.ndarray, normals: np.ndarray, prim_idx: np.ndarray) -> np.ndarray:
    light = np.asarray(scene.light_dir, dtype=float)
    light = light / np.linalg.norm(light)
    rgb = np.tile(np.asarray(scene.background, dtype=float), (points.shape[0], 1))
    for i, prim in enumerate(scene.primitives):
        sel = prim_idx == i
        if not sel.any():
            continue
        tex = _texture(prim.texture, points[sel])
        lam = 0.35 + 0.65 * np.abs(normals[sel] @ light) if prim.kind == "plane" else (
            0.35 + 0.65 * np.clip(normals[sel] @ light, 0.0, None)
        )
        rgb[sel] = np.asarray(prim.color) * (tex * lam)[:, None]
    return np.clip(rgb, 0.0, 1.0)


def _render_rgb(scene: SceneSpec, pose: PoseSE3, K: CameraIntrinsics):
    origin, dirs, z_per_t = camera_rays(pose, K)
    flat = dirs.reshape(-1, 3)
    t, nrm, idx = cast_rays(scene, origin, flat)
    hit = np.isfinite(t)
    pts = origin + np.where(hit, t, 0.0)[:, None] * flat
    rgb = shade(scene, pts, nrm, np.where(hit, idx, -1))
    depth = np.where(hit, t * z_per_t.reshape(-1), 0.0).reshape(K.height, K.width)
    return rgb.reshape(K.height, K.width, 3), depth, hit.reshape(K.height, K.width)


def render_gt(scene: SceneSpec, view: int, pose: PoseSE3 | None = None, supersample: int = 3):
    """Render the RGB image (H, W, 3) and z-depth of one view.

    Colors average ``supersample`` x ``supersample`` sub-pixel rays (box
    filter); depth comes from the single ray through the pixel center.
    Background pixels are black and invalid in the depth map.
    """
    pose = scene.poses[view] if pose is None else pose
    K = scene.K
    rgb, depth, hit = _render_rgb(scene, pose, K)
    if supersample > 1:
        s = supersample
        off = (s - 1) / 2.0
        K_hi = CameraIntrinsics(K.fx * s, K.fy * s, K.cx * s + off, K.cy * s + off, K.width * s, K.height * s)
        hi, _, _ = _render_rgb(scene, pose, K_hi)
        rgb = box_downsample(hi, s)
    return rgb, DepthMap(depth, hit, view)


def to_gray(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114]) if image.ndim == 3 else image


# --- pose perturbation -------------------------------------------------------


def perturb_poses(
    trajectory: list[PoseSE3],
    rot_std_deg: float,
    trans_std_frac: float,
    scene_scale: float = 0.5,
    seed: int = 0,
    keep_first: bool = False,
):
    """Left-multiply each pose by a random rigid motion.

    The rotation uses a uniformly random axis with a N(0, rot_std) angle; the
    translation is isotropic N(0, (trans_std_frac * scene_scale)^2) per axis.
    Returns the perturbed poses and the applied twists.
    """
    rng = np.random.default_rng(seed)
    out, twists = [], []
    for k, pose in enumerate(trajectory):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(rot_std_deg) * rng.normal()
        trans = trans_std_frac * scene_scale * rng.normal(size=3)
        if keep_first and k == 0:
            angle, trans = 0.0, np.zeros(3)
        delta = PoseSE3(so3_exp(axis * angle), trans)
        out.append(delta @ pose)
        twists.append(np.concatenate([trans, axis * angle]))
    return out, twists


# --- artifacts ---------------------------------------------------------------


def _smooth_field(shape, frequency: float, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency field with values in [-1, 1]."""
    H, W = shape
    y, x = np.mgrid[0:H, 0:W] / max(H, W)
    acc = np.zeros(shape)
    for _ in range(3):
        kx, ky = rng.normal(size=2) * frequency
        ph = rng.uniform(0, 2 * np.pi)
        acc += np.sin(2 * np.pi * (kx * x + ky * y) + ph)
    return acc / 3.0


def inject_artifacts(depth: DepthMap, spec: ArtifactSpec, seed: int = 0):
    """Corrupt a depth map and return exact labels of what was changed."""
    rng = np.random.default_rng(seed)
    vals = depth.values.copy()
    valid = depth.valid.copy()
    H, W = vals.shape
    zeros = np.zeros((H, W), dtype=bool)
    masks = ArtifactMasks(zeros.copy(), zeros.copy(), zeros.copy(), zeros.copy(), zeros.copy())

    if spec.stack_scale_std > 0 or spec.stack_bias_std > 0:
        s = 1.0 + spec.stack_scale_std * rng.normal()
        b = spec.stack_bias_std * rng.normal()
        vals = np.where(valid, s * vals + b, 0.0)
        masks.stacking = valid.copy()
        masks.stack_scale, masks.stack_bias = float(s), float(b)

    if spec.fog_amplitude > 0:
        fog = _smooth_field((H, W), spec.fog_frequency, rng)
        vals = np.where(valid, vals * (1.0 + spec.fog_amplitude * fog), 0.0)
        masks.fog = valid & (fog != 0)

    if spec.floater_count > 0:
        r = spec.floater_radius_px
        yy, xx = np.mgrid[0:H, 0:W]
        cand = np.argwhere(valid)
        centers = []
        tries = 0
        while len(centers) < spec.floater_count and tries < 10000 and len(cand):
            tries += 1
            cy, cx = cand[rng.integers(len(cand))]
            if all((cy - a) ** 2 + (cx - b) ** 2 > (2 * r + 2) ** 2 for a, b in centers):
                centers.append((cy, cx))
        for cy, cx in centers:
            disc = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & valid
            vals[disc] *= 1.0 - spec.floater_offset
            masks.floater |= disc

    if spec.noise_std > 0:
        vals = np.where(valid, vals * (1.0 + spec.noise_std * rng.normal(size=(H, W))), 0.0)
        masks.noise = valid.copy()

    if spec.hole_fraction > 0:
        target = spec.hole_fraction * valid.sum()
        s = spec.hole_size_px
        holes = zeros.copy()
        while (holes & valid).sum() < target:
            y0 = rng.integers(0, max(H - s, 1))
            x0 = rng.integers(0, max(W - s, 1))
            holes[y0 : y0 + s, x0 : x0 + s] = True
        masks.hole = holes & valid
        valid = valid & ~holes

    return DepthMap(vals, valid & (vals > 0), depth.frame_id), masks


def floater_count_for_fraction(shape, fraction: float, radius_px: float) -> int:
    """Number of discs of ``radius_px`` covering roughly ``fraction`` of the image."""
    area = np.pi * radius_px**2
    return max(1, int(round(fraction * shape[0] * shape[1] / area)))


# --- scene-level helpers -----------------------------------------------------


@dataclass
class SyntheticDataset:
    scene: SceneSpec
    images: list
    gt_depths: list
    depths: list
    masks: list
    init_poses: list
    pose_twists: list = field(default_factory=list)

    @property
    def gt_poses(self) -> list[PoseSE3]:
        return self.scene.poses


def make_dataset(
    scene: SceneSpec,
    artifacts: ArtifactSpec | None = None,
    rot_std_deg: float = 0.0,
    trans_std_frac: float = 0.0,
    seed: int = 0,
) -> SyntheticDataset:
    """Render every view, corrupt its depth, and perturb the rig poses."""
    artifacts = artifacts or ArtifactSpec()
    images, gts, depths, masks = [], [], [], []
    for v in range(scene.n_views):
        img, d = render_gt(scene, v)
        cd, m = inject_artifacts(d, artifacts, seed=seed * 1000 + v)
        images.append(img)
        gts.append(d)
        depths.append(cd)
        masks.append(m)
    init, twists = perturb_poses(scene.poses, rot_std_deg, trans_std_frac, scene.scale, seed=seed + 7)
    return SyntheticDataset(scene, images, gts, depths, masks, init, twists)


def random_twist(rng: np.random.Generator, rot_deg: float, trans: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return np.concatenate([trans * direction, np.radians(rot_deg) * axis])


def rotate_about(pose: PoseSE3, twist: np.ndarray) -> PoseSE3:
    return se3_exp(twist) @ pose


def annealed_gt_regenerator(gt_depths, noise0: float = 0.004, decay: float = 0.5, seed: int = 0):
    """Stand-in for refreshed stereo: ground truth with multiplicative noise shrinking per round."""

    def regen(iteration: int, poses, d_obs):
        rng = np.random.default_rng(seed + iteration)
        sigma = noise0 * decay ** (iteration - 1)
        out = []
        for d in gt_depths:
            vals = np.where(d.valid, d.values * (1.0 + sigma * rng.normal(size=d.shape)), 0.0)
            out.append(DepthMap(vals, d.valid.copy(), d.frame_id))
        return out

    return regen


def stacked_surface_dataset(n_views: int = 8, scale_std: float = 0.03, seed: int = 0, **pose_noise) -> SyntheticDataset:
    """Each view's depth carries its own scale error, so surfaces stack across views."""
    scene = tabletop_scene(n_views=n_views)
    return make_dataset(scene, ArtifactSpec(stack_scale_std=scale_std), seed=seed, **pose_noise)


# --- ground-truth meshes -----------------------------------------------------


def _plane_basis(n: np.ndarray):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def _tessellate(prim: Primitive, step: float):
    c = np.asarray(prim.center, dtype=float)
    if prim.kind == "plane":
        n = np.asarray(prim.normal, dtype=float)
        n = n / np.linalg.norm(n)
        e1, e2 = _plane_basis(n)
        R = prim.size[0]
        rings = max(2, int(np.ceil(R / step)))
        segs = max(16, int(np.ceil(2 * np.pi * R / step)))
        verts = [c]
        tris = []
        ang = 2 * np.pi * np.arange(segs) / segs
        for k in range(1, rings + 1):
            r = R * k / rings
            verts.extend(c + r * (np.cos(a) * e1 + np.sin(a) * e2) for a in ang)
        for s in range(segs):
            tris.append((0, 1 + s, 1 + (s + 1) % segs))
        for k in range(1, rings):
            base0 = 1 + (k - 1) * segs
            base1 = 1 + k * segs
            for s in range(segs):
                a0, a1 = base0 + s, base0 + (s + 1) % segs
                b0, b1 = base1 + s, base1 + (s + 1) % segs
                tris.extend([(a0, b0, b1), (a0, b1, a1)])
        return np.array(verts), np.array(tris)
    if prim.kind == "sphere":
        r = prim.size[0]
        n_lat = max(8, int(np.ceil(np.pi * r / step)))
        n_lon = 2 * n_lat
        th = np.pi * np.arange(1, n_lat) / n_lat
        ph = 2 * np.pi * np.arange(n_lon) / n_lon
        T, P = np.meshgrid(th, ph, indexing="ij")
        ring = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
        verts = np.vstack([[0, 0, 1], ring, [0, 0, -1]]) * r + c
        tris = []
        last = len(verts) - 1
        for s in range(n_lon):
            tris.append((0, 1 + s, 1 + (s + 1) % n_lon))
        for k in range(n_lat - 2):
            b0, b1 = 1 + k * n_lon, 1 + (k + 1) * n_lon
            for s in range(n_lon):
                s1 = (s + 1) % n_lon
                tris.extend([(b0 + s, b1 + s, b1 + s1), (b0 + s, b1 + s1, b0 + s1)])
        b0 = 1 + (n_lat - 2) * n_lon
        for s in range(n_lon):
            tris.append((b0 + s, last, b0 + (s + 1) % n_lon))
        return verts, np.array(tris)
    if prim.kind == "box":
        h = np.asarray(prim.size, dtype=float)
        verts, tris = [], []
        for axis in range(3):
            for sign in (-1.0, 1.0):
                a1, a2 = [k for k in range(3) if k != axis]
                n1 = max(1, int(np.ceil(2 * h[a1] / step)))
                n2 = max(1, int(np.ceil(2 * h[a2] / step)))
                g1 = np.linspace(-h[a1], h[a1], n1 + 1)
                g2 = np.linspace(-h[a2], h[a2], n2 + 1)
                base = len(verts)
                for x in g1:
                    for y in g2:
                        p = np.zeros(3)
                        p[axis], p[a1], p[a2] = sign * h[axis], x, y
                        verts.append(c + p)
                for i in range(n1):
                    for j in range(n2):
                        v00 = base + i * (n2 + 1) + j
                        v01, v10, v11 = v00 + 1, v00 + n2 + 1, v00 + n2 + 2
                        tris.extend([(v00, v10, v11), (v00, v11, v01)])
        return np.array(verts), np.array(tris)
    raise InvalidInputError(f"unknown primitive kind {prim.kind!r}")


def _visible_from_any(scene: SceneSpec, points: np.ndarray, tol: float = 2e-3) -> np.ndarray:
    from .geometry import project_array, rigid_apply

    vis = np.zeros(len(points), dtype=bool)
    K = scene.K
    for pose in scene.poses:
        x, y, z = rigid_apply(pose.rotation, pose.translation, points[:, 0], points[:, 1], points[:, 2])
        u, v, front = project_array(x, y, z, K)
        inside = front & (u >= -0.5) & (u <= K.width - 0.5) & (v >= -0.5) & (v <= K.height - 0.5)
        sel = inside & ~vis
        if not sel.any():
            continue
        c = pose.center
        d = points[sel] - c
        dist = np.linalg.norm(d, axis=1)
        t, _, _ = cast_rays(scene, c, d / dist[:, None])
        vis[np.flatnonzero(sel)[t >= dist - tol]] = True
    return vis


def scene_mesh(scene: SceneSpec, step: float = 0.005, visible_only: bool = True):
    """Tessellated primitives; optionally only triangles whose centroid some camera sees."""
    from .metrics import TriangleMesh

    V, T = [], []
    off = 0
    for prim in scene.primitives:
        v, t = _tessellate(prim, step)
        V.append(v)
        T.append(t + off)
        off += len(v)
    verts, tris = np.vstack(V), np.vstack(T)
    if visible_only:
        cen = verts[tris].mean(axis=1)
        tris = tris[_visible_from_any(scene, cen)]
    return TriangleMesh(verts, tris)
