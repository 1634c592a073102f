"""Pinhole camera model, SE(3) poses, depth maps and rays.

Conventions used throughout the package:

- Poses are world-to-camera: ``p_cam = R @ p_world + t``.
- Camera frame is x right, y down, z forward; depth means camera-frame z.
- Pixel centers sit at integer coordinates (no +0.5 offset).
- Invalid depth is stored as 0 *and* flagged in a separate boolean mask.
- Tangent vectors are ordered ``(rho, omega)``: translation first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its domain."""


class BehindCameraError(InvalidInputError):
    """Raised by :func:`project` for points with non-positive depth."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int) -> CameraIntrinsics:
        """Intrinsics of the image subsampled with stride ``factor``.

        With integer pixel centers, keeping every ``factor``-th pixel maps
        low-res pixel ``u'`` to full-res ``factor * u'``, so ``K/factor`` is exact.
        """
        return CameraIntrinsics(
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            self.width // factor,
            self.height // factor,
        )

    def box_downsampled(self, factor: int) -> CameraIntrinsics:
        """Intrinsics matching a ``factor`` x ``factor`` box-averaged image.

        Each low-res pixel averages full-res pixels ``factor*u' .. factor*u'+factor-1``
        whose center is ``factor*u' + (factor-1)/2``.
        """
        off = (factor - 1) / 2.0
        return CameraIntrinsics(
            self.fx / factor,
            self.fy / factor,
            (self.cx - off) / factor,
            (self.cy - off) / factor,
            self.width // factor,
            self.height // factor,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    W = _skew(omega)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def so3_log(R: np.ndarray) -> np.ndarray:
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos))
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * v
    if np.pi - theta < 1e-6:
        # near pi: recover the axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis[(k + 1) % 3] = np.copysign(axis[(k + 1) % 3], B[k, (k + 1) % 3])
        axis[(k + 2) % 3] = np.copysign(axis[(k + 2) % 3], B[k, (k + 2) % 3])
        axis /= np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * v


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = _skew(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * W + b * W @ W


@dataclass(frozen=True)
class PoseSE3:
    """Rigid world-to-camera transform ``p_cam = R p_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> PoseSE3:
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_camera_to_world(cls, R_cw: np.ndarray, center: np.ndarray) -> PoseSE3:
        R_cw = np.asarray(R_cw, dtype=float)
        return cls(R_cw.T, -R_cw.T @ np.asarray(center, dtype=float))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> PoseSE3:
        """Camera at ``eye`` with its optical axis through ``target``."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls.from_camera_to_world(np.stack([x, y, z], axis=1), eye)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Viewing direction (camera +z) in world coordinates."""
        return self.rotation[2].copy()

    def inverse(self) -> PoseSE3:
        return PoseSE3(self.rotation.T, -self.rotation.T @ self.translation)

    def __matmul__(self, other: PoseSE3) -> PoseSE3:
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def retract(self, twist: np.ndarray) -> PoseSE3:
        """Left-multiplicative update ``exp(twist) * self``."""
        return se3_exp(twist) @ self

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol
        )


def se3_exp(twist: np.ndarray) -> PoseSE3:
    twist = np.asarray(twist, dtype=float)
    rho, omega = twist[:3], twist[3:]
    return PoseSE3(so3_exp(omega), _left_jacobian(omega) @ rho)


def se3_log(pose: PoseSE3) -> np.ndarray:
    omega = so3_log(pose.rotation)
    rho = np.linalg.solve(_left_jacobian(omega), pose.translation)
    return np.concatenate([rho, omega])


def rotation_angle_deg(R: np.ndarray) -> float:
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


@dataclass(frozen=True)
class DepthMap:
    """Dense metric depth with an explicit validity mask.

    Invalid pixels always carry the sentinel 0; a 0 without ``valid=False`` is
    impossible by construction.
    """

    values: np.ndarray
    valid: np.ndarray = None
    frame_id: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise InvalidInputError("depth map must be 2-D")
        if self.valid is None:
            m = np.isfinite(v) & (v > 0)
        else:
            m = np.array(self.valid, dtype=bool)
            if m.shape != v.shape:
                raise InvalidInputError("mask shape does not match depth shape")
            m &= np.isfinite(v) & (v > 0)
        v = np.where(m, v, 0.0)
        v.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray, valid: np.ndarray | None = None) -> DepthMap:
        return DepthMap(values, self.valid if valid is None else valid, self.frame_id)

    def masked(self, keep: np.ndarray) -> DepthMap:
        return DepthMap(self.values, self.valid & keep, self.frame_id)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise InvalidInputError("ray direction must be unit length")
        if not (0 < self.near < self.far):
            raise InvalidInputError("need 0 < near < far")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t, dtype=float), self.direction)


# --- scalar primitives -----------------------------------------------------


def unproject(pixel, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel ``(u, v)`` at z-depth ``depth`` into the camera frame."""
    if not np.isfinite(depth) or depth <= 0:
        raise InvalidInputError(f"depth must be positive and finite, got {depth}")
    u, v = pixel
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def project(p_cam, K: CameraIntrinsics) -> tuple[float, float, float]:
    """Project a camera-frame point; returns ``(u, v, z)``."""
    x, y, z = (float(c) for c in p_cam)
    if not z > 0:
        raise BehindCameraError(f"point has non-positive depth {z}")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, z


def world_to_cam(p_world, pose: PoseSE3) -> np.ndarray:
    return pose.rotation @ np.asarray(p_world, dtype=float) + pose.translation


def cam_to_world(p_cam, pose: PoseSE3) -> np.ndarray:
    return pose.rotation.T @ (np.asarray(p_cam, dtype=float) - pose.translation)


def bilinear_sample(depth: DepthMap, at) -> float | None:
    """Bilinearly interpolate a depth map; ``None`` when the result is invalid."""
    val, ok = bilinear_sample_array(depth.values, depth.valid, np.array([at[0]]), np.array([at[1]]))
    return float(val[0]) if ok[0] else None


# --- vectorized primitives -------------------------------------------------


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def unproject_array(u, v, d, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d


def rigid_apply(R: np.ndarray, t: np.ndarray, x, y, z):
    """``R @ p + t`` on component arrays, summed left to right."""
    return (
        R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0],
        R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1],
        R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2],
    )


def rigid_apply_inverse(R: np.ndarray, t: np.ndarray, x, y, z):
    """``R.T @ (p - t)`` on component arrays."""
    a, b, c = x - t[0], y - t[1], z - t[2]
    return (
        R[0, 0] * a + R[1, 0] * b + R[2, 0] * c,
        R[0, 1] * a + R[1, 1] * b + R[2, 1] * c,
        R[0, 2] * a + R[1, 2] * b + R[2, 2] * c,
    )


def project_array(x, y, z, K: CameraIntrinsics):
    """Vectorized projection. Returns ``(u, v, in_front)``; u/v are 0 behind the camera."""
    in_front = z > 0
    zs = np.where(in_front, z, 1.0)
    return K.fx * x / zs + K.cx, K.fy * y / zs + K.cy, in_front


LATTICE_SNAP = 1e-9  # px


def _snap(x: np.ndarray) -> np.ndarray:
    """Move coordinates within ``LATTICE_SNAP`` of an integer onto it.

    Roundoff in a project/unproject chain must not turn an exact lattice hit
    into a blend that depends on an invalid zero-weight neighbor.
    """
    r = np.round(x)
    return np.where(np.abs(x - r) < LATTICE_SNAP, r, x)


def bilinear_sample_array(values: np.ndarray, valid: np.ndarray, u, v):
    """Bilinear lookup at continuous coordinates.

    A sample is valid only when it lies in ``[0, W-1] x [0, H-1]`` and every
    pixel with non-zero interpolation weight is valid. Coordinates within
    ``LATTICE_SNAP`` of an integer count as lying on it. Mixed neighborhoods are
    rejected rather than renormalized.
    """
    H, W = values.shape
    u = _snap(np.asarray(u, dtype=np.float64))
    v = _snap(np.asarray(v, dtype=np.float64))
    inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    x0 = np.minimum(np.floor(uc).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(vc).astype(np.int64), H - 2)
    fx = uc - x0
    fy = vc - y0
    v00 = values[y0, x0]
    v01 = values[y0, x0 + 1]
    v10 = values[y0 + 1, x0]
    v11 = values[y0 + 1, x0 + 1]
    ok = inside & valid[y0, x0]
    ok &= (fx == 0) | valid[y0, x0 + 1]
    ok &= (fy == 0) | valid[y0 + 1, x0]
    ok &= (fx == 0) | (fy == 0) | valid[y0 + 1, x0 + 1]
    out = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    return np.where(ok, out, 0.0), ok


def bilinear_with_gradient(image: np.ndarray, u, v):
    """Sample an image (H, W) or (H, W, C) with its analytic spatial gradient.

    Returns ``(value, d/du, d/dv, inside)``. Out-of-range samples are clamped
    and flagged via ``inside``.
    """
    H, W = image.shape[:2]
    inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.clip(u, 0.0, W - 1)
    vc = np.clip(v, 0.0, H - 1)
    x0 = np.minimum(np.floor(uc).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(vc).astype(np.int64), H - 2)
    fx = uc - x0
    fy = vc - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    i00 = image[y0, x0]
    i01 = image[y0, x0 + 1]
    i10 = image[y0 + 1, x0]
    i11 = image[y0 + 1, x0 + 1]
    top = (1.0 - fx) * i00 + fx * i01
    bot = (1.0 - fx) * i10 + fx * i11
    val = (1.0 - fy) * top + fy * bot
    du = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    dv = bot - top
    return val, du, dv, inside


def camera_rays(pose: PoseSE3, K: CameraIntrinsics):
    """Unit ray directions (H, W, 3) in world frame and the shared origin.

    Also returns ``z_per_t``: camera-frame depth gained per unit ray length,
    used to convert between z-depth and distance along the ray.
    """
    u, v = pixel_grid(K.height, K.width)
    dc = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    norm = np.linalg.norm(dc, axis=-1, keepdims=True)
    dc = dc / norm
    dirs = dc @ pose.rotation  # R^T d for row vectors
    return pose.center, dirs, dc[..., 2]


def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """``factor`` x ``factor`` block average; trailing rows/cols are dropped."""
    H, W = image.shape[:2]
    h, w = H // factor, W // factor
    img = image[: h * factor, : w * factor]
    shape = (h, factor, w, factor) + img.shape[2:]
    return img.reshape(shape).mean(axis=(1, 3))


@dataclass
class Frame:
    """One posed view: image, depth and world-to-camera pose."""

    image: np.ndarray
    depth: DepthMap
    pose: PoseSE3
    frame_id: int = 0
    meta: dict = field(default_factory=dict)
