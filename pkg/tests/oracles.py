"""Independent reference implementations used as test oracles.

These are written as straight-line scalar loops, deliberately sharing no
code with the package under test.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def _snap(x):
    r = float(np.round(x))
    return r if abs(x - r) < 1e-9 else x


@numba.njit(cache=True)
def _bilinear(vals, valid, u, v):
    H, W = vals.shape
    u = _snap(u)
    v = _snap(v)
    if not (0.0 <= u <= W - 1 and 0.0 <= v <= H - 1):
        return 0.0, False
    x0 = min(int(math.floor(u)), W - 2)
    y0 = min(int(math.floor(v)), H - 2)
    a = u - x0
    b = v - y0
    total = 0.0
    for dy in range(2):
        for dx in range(2):
            wx = a if dx else 1.0 - a
            wy = b if dy else 1.0 - b
            if wx * wy != 0.0 or (dx == 0 and dy == 0):
                if not valid[y0 + dy, x0 + dx]:
                    return 0.0, False
    top = (1.0 - a) * vals[y0, x0] + a * vals[y0, x0 + 1]
    bot = (1.0 - a) * vals[y0 + 1, x0] + a * vals[y0 + 1, x0 + 1]
    total = (1.0 - b) * top + b * bot
    return total, True


@numba.njit(cache=True)
def _to_world(R, t, x, y, z):
    a, b, c = x - t[0], y - t[1], z - t[2]
    return (R[0, 0] * a + R[1, 0] * b + R[2, 0] * c,
            R[0, 1] * a + R[1, 1] * b + R[2, 1] * c,
            R[0, 2] * a + R[1, 2] * b + R[2, 2] * c)


@numba.njit(cache=True)
def _to_cam(R, t, x, y, z):
    return (R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0],
            R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1],
            R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2])


@numba.njit(cache=True)
def consistent_pixel(u, v, d_ref, R_ref, t_ref, src_vals, src_valid, R_src, t_src,
                     fx, fy, cx, cy, tau_depth, tau_reproj):
    """1 when reference pixel (u, v) at depth d_ref passes both checks, else 0."""
    # forward: reference pixel -> world -> source camera
    xw, yw, zw = _to_world(R_ref, t_ref, (u - cx) * d_ref / fx, (v - cy) * d_ref / fy, d_ref)
    xs, ys, zs = _to_cam(R_src, t_src, xw, yw, zw)
    if not zs > 0.0:
        return 0
    us = fx * xs / zs + cx
    vs = fy * ys / zs + cy
    d_src, ok = _bilinear(src_vals, src_valid, us, vs)
    if not ok:
        return 0
    if not abs(d_src - zs) / zs < tau_depth:
        return 0
    # backward: source pixel at its own depth -> world -> reference camera
    bw = _to_world(R_src, t_src, (us - cx) * d_src / fx, (vs - cy) * d_src / fy, d_src)
    rx, ry, rz = _to_cam(R_ref, t_ref, bw[0], bw[1], bw[2])
    if not rz > 0.0:
        return 0
    ub = fx * rx / rz + cx
    vb = fy * ry / rz + cy
    e = math.sqrt((ub - u) ** 2 + (vb - v) ** 2)
    if not e < tau_reproj:
        return 0
    if not abs(rz - d_ref) / d_ref < tau_depth:
        return 0
    return 1


@numba.njit(cache=True)
def _votes(ref_vals, ref_valid, R_ref, t_ref, src_vals, src_valid, R_src, t_src, K, tau_depth, tau_reproj):
    H, W = ref_vals.shape
    n = src_vals.shape[0]
    V = np.zeros((H, W), dtype=np.int64)
    for v in range(H):
        for u in range(W):
            if not ref_valid[v, u]:
                continue
            for i in range(n):
                V[v, u] += consistent_pixel(float(u), float(v), ref_vals[v, u], R_ref, t_ref,
                                            src_vals[i], src_valid[i], R_src[i], t_src[i],
                                            K[0], K[1], K[2], K[3], tau_depth, tau_reproj)
    return V


def brute_force_vote(ref_depth, ref_pose, neighbors, K, thr):
    """Votes, confidence, mask, filtered depth values and L_vote for one reference view."""
    src_vals = np.stack([d.values for d, _ in neighbors])
    src_valid = np.stack([d.valid for d, _ in neighbors])
    R_src = np.stack([p.rotation for _, p in neighbors])
    t_src = np.stack([p.translation for _, p in neighbors])
    kv = np.array([K.fx, K.fy, K.cx, K.cy])
    V = _votes(np.ascontiguousarray(ref_depth.values), np.ascontiguousarray(ref_depth.valid),
               np.ascontiguousarray(ref_pose.rotation), np.ascontiguousarray(ref_pose.translation),
               src_vals, src_valid, R_src, t_src, kv, thr.tau_depth, thr.tau_reproj)
    n = len(neighbors)
    M = (V >= thr.m_vote) & ref_depth.valid
    filtered = np.where(M, ref_depth.values, 0.0)
    omega = ref_depth.valid
    s = [1.0 / (1.0 + math.exp(-(int(x) - thr.m_vote) / thr.tau_m)) for x in V[omega]]
    l_vote = 1.0 - math.fsum(s) / len(s)
    return V, V / n, M, filtered, l_vote


def simpson(f, a, b, n=20000):
    """Composite Simpson rule with ``n`` (even) panels."""
    if n % 2:
        n += 1
    x = np.linspace(a, b, n + 1)
    y = f(x)
    h = (b - a) / n
    return h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())


def closest_point_on_triangle(p, a, b, c):
    """Closest point by minimizing over the interior plane hit and the three edges."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    # barycentric inside test
    v0, v1, v2 = b - a, c - a, q - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    s = (d11 * d20 - d01 * d21) / den
    t = (d00 * d21 - d01 * d20) / den
    if s >= 0 and t >= 0 and s + t <= 1:
        return q
    best, best_d = None, np.inf
    for e0, e1 in ((a, b), (b, c), (c, a)):
        e = e1 - e0
        lam = np.clip((p - e0) @ e / (e @ e), 0.0, 1.0)
        x = e0 + lam * e
        d = np.linalg.norm(p - x)
        if d < best_d:
            best, best_d = x, d
    return best
