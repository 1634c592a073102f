"""Depth-guided ray sampling from a truncated Gaussian.

Sample depths are drawn by inverse-transform sampling: a uniform variate is
mapped into the CDF mass between the truncation bounds and pushed through the
inverse standard-normal CDF.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .geometry import InvalidInputError, Ray

_SQRT2 = np.sqrt(2.0)
_SQRT2PI = np.sqrt(2.0 * np.pi)

# Acklam's rational approximation to the inverse normal CDF
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549671010242868e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def std_normal_cdf(x):
    """Standard normal CDF, accurate in both tails."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / _SQRT2)


def std_normal_cdf_inv(p):
    """Inverse standard normal CDF.

    Acklam's approximation (relative error ~1e-9) followed by one Halley step
    on ``std_normal_cdf``. Raises on ``p`` outside the open interval (0, 1).
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(~(p > 0) | ~(p < 1)):
        raise InvalidInputError("inverse normal CDF is defined on (0, 1) only")
    x = np.empty_like(p)

    lo = p < _P_LOW
    hi = p > 1 - _P_LOW
    mid = ~(lo | hi)

    q = np.sqrt(-2 * np.log(p[lo]))
    x[lo] = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
        (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1
    )
    q = np.sqrt(-2 * np.log1p(-p[hi]))
    x[hi] = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
        (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1
    )
    q = p[mid] - 0.5
    r = q * q
    x[mid] = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1
    )

    # Halley refinement; the upper half is refined through the lower tail
    # so that 1 - p does not cancel.
    upper = p > 0.5
    target = np.where(upper, 1.0 - p, p)
    xs = np.where(upper, -x, x)
    e = std_normal_cdf(xs) - target
    u = e * _SQRT2PI * np.exp(0.5 * xs * xs)
    xs = xs - u / (1 + 0.5 * xs * u)
    x = np.where(upper, -xs, xs)
    return x if x.ndim else float(x)


@dataclass(frozen=True)
class TruncatedGaussian:
    """Gaussian of mean ``d_hat`` and std ``sigma_d`` restricted to ``[t_n, t_f]``."""

    d_hat: float
    sigma_d: float
    t_n: float
    t_f: float

    def __post_init__(self):
        if not self.sigma_d > 0:
            raise InvalidInputError("sigma_d must be positive")
        if not self.t_n < self.t_f:
            raise InvalidInputError("need t_n < t_f")
        if not self.mass > 0:
            raise InvalidInputError("truncation interval carries no probability mass")

    @property
    def a(self) -> float:
        return (self.t_n - self.d_hat) / self.sigma_d

    @property
    def b(self) -> float:
        return (self.t_f - self.d_hat) / self.sigma_d

    @property
    def reflected(self) -> bool:
        # both bounds in the upper tail: work with -x where the CDF is not ~1
        return self.a > 0

    def _tail_bounds(self) -> tuple[float, float]:
        if self.reflected:
            return float(std_normal_cdf(-self.b)), float(std_normal_cdf(-self.a))
        return float(std_normal_cdf(self.a)), float(std_normal_cdf(self.b))

    @property
    def mass(self) -> float:
        lo, hi = self._tail_bounds()
        return hi - lo

    @property
    def normalizer(self) -> float:
        """Closed form of the integral of the unnormalized density over the interval."""
        return self.sigma_d * _SQRT2PI * self.mass

    def cdf(self, t):
        t = np.clip(np.asarray(t, dtype=np.float64), self.t_n, self.t_f)
        lo, hi = self._tail_bounds()
        z = (t - self.d_hat) / self.sigma_d
        if self.reflected:
            return (hi - std_normal_cdf(-z)) / (hi - lo)
        return (std_normal_cdf(z) - lo) / (hi - lo)

    def ppf(self, u):
        """Map uniform variates in [0, 1] to depths via the inverse CDF."""
        u = np.asarray(u, dtype=np.float64)
        lo, hi = self._tail_bounds()
        p = lo + u * (hi - lo) if not self.reflected else hi - u * (hi - lo)
        tiny = np.finfo(np.float64).tiny
        p = np.clip(p, tiny, 1.0 - np.finfo(np.float64).eps / 2)
        z = std_normal_cdf_inv(p)
        if self.reflected:
            z = -z
        return np.clip(self.d_hat + self.sigma_d * z, self.t_n, self.t_f)


def truncated_pdf(tg: TruncatedGaussian, t):
    """Density in 1/m; zero outside ``[t_n, t_f]``."""
    t = np.asarray(t, dtype=np.float64)
    dens = np.exp(-((t - tg.d_hat) ** 2) / (2 * tg.sigma_d**2)) / tg.normalizer
    return np.where((t >= tg.t_n) & (t <= tg.t_f), dens, 0.0)


def stratified_uniforms(count: int, rng: np.random.Generator) -> np.ndarray:
    """One jittered draw per equal-mass bin, strictly inside (0, 1)."""
    jitter = rng.uniform(size=count)
    u = (np.arange(count) + jitter) / count
    eps = np.finfo(np.float64).eps
    return np.clip(u, eps, 1.0 - eps)


def sample_depths(tg: TruncatedGaussian, count: int, u=None, seed: int | None = 0) -> np.ndarray:
    """Sorted sample depths ``d_hat + sigma_d * Phi^-1(Phi_a + u (Phi_b - Phi_a))``.

    ``u`` may be given explicitly; otherwise stratified draws are generated
    from ``seed``.
    """
    if count < 1:
        raise InvalidInputError("count must be at least 1")
    if u is None:
        u = stratified_uniforms(count, np.random.default_rng(seed))
    return np.sort(tg.ppf(u))


def default_sigma(depth_rms_noise: float, voxel_size: float) -> float:
    """Three times the depth noise, but never below two voxel widths."""
    return max(3.0 * depth_rms_noise, 2.0 * voxel_size)


def place_ray_samples(ray: Ray, d_hat: float | None, sigma_d: float, count: int, seed: int | None = 0):
    """Points along ``ray`` concentrated around ``d_hat``.

    Returns ``(points, t)``. When ``d_hat`` is missing or outside the ray's
    interval, falls back to stratified uniform samples over ``[near, far]``.
    """
    rng = np.random.default_rng(seed)
    if d_hat is None or not np.isfinite(d_hat) or not (ray.near < d_hat < ray.far):
        u = stratified_uniforms(count, rng)
        t = ray.near + u * (ray.far - ray.near)
    else:
        t = sample_depths(TruncatedGaussian(d_hat, sigma_d, ray.near, ray.far), count, seed=seed)
    return ray.at(t), t


def guided_samples_batch(d_hat: np.ndarray, sigma_d: float, t_n, t_f, count: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized sampling for many rays at once; shape ``(R, count)``.

    ``t_n`` and ``t_f`` are scalars or per-ray arrays. Rays whose ``d_hat``
    is not inside ``(t_n, t_f)`` get stratified uniform samples over the
    full interval.
    """
    d_hat = np.asarray(d_hat, dtype=np.float64)
    R = d_hat.shape[0]
    t_n = np.broadcast_to(np.asarray(t_n, dtype=np.float64), (R,))[:, None]
    t_f = np.broadcast_to(np.asarray(t_f, dtype=np.float64), (R,))[:, None]
    u = (np.arange(count)[None, :] + rng.uniform(size=(R, count))) / count
    eps = np.finfo(np.float64).eps
    u = np.clip(u, eps, 1 - eps)
    ok = np.isfinite(d_hat) & (d_hat > t_n[:, 0]) & (d_hat < t_f[:, 0])
    out = t_n + u * (t_f - t_n)
    if ok.any():
        dh = d_hat[ok][:, None]
        lo, hi = t_n[ok], t_f[ok]
        a = (lo - dh) / sigma_d
        b = (hi - dh) / sigma_d
        # d_hat lies inside the interval so a < 0 < b; lower-tail form is safe
        pa = std_normal_cdf(a)
        pb = std_normal_cdf(b)
        p = np.clip(pa + u[ok] * (pb - pa), np.finfo(np.float64).tiny, 1 - eps / 2)
        out[ok] = np.clip(dh + sigma_d * std_normal_cdf_inv(p), lo, hi)
    return np.sort(out, axis=1)
