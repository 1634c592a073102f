"""Bidirectional multi-view depth consistency voting.

A reference pixel earns one vote from neighbor ``i`` when its depth, carried
into camera ``i``, agrees with the neighbor's depth there (forward check) and
the neighbor's depth, carried back, lands on the same pixel at the same depth
(backward check). Projections that leave the image, fall behind a camera or
hit invalid depth are "no" votes; the denominator stays ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    CameraIntrinsics,
    DepthMap,
    Frame,
    InvalidInputError,
    PoseSE3,
    bilinear_sample_array,
    pixel_grid,
    project_array,
    rigid_apply,
    rigid_apply_inverse,
    unproject_array,
)


@dataclass(frozen=True)
class VotingThresholds:
    tau_depth: float = 0.05
    tau_reproj: float = 2.0
    m_vote: int = 3
    tau_m: float = 0.5

    def __post_init__(self):
        if self.tau_depth <= 0 or self.tau_reproj <= 0 or self.tau_m <= 0:
            raise InvalidInputError("voting tolerances must be positive")
        if self.m_vote < 1:
            raise InvalidInputError("m_vote must be at least 1")


@dataclass(frozen=True)
class VoteMap:
    """Votes ``V``, confidence ``V/N``, mask ``V >= m_vote`` and filtered depth."""

    votes: np.ndarray
    confidence: np.ndarray
    mask: np.ndarray
    filtered: DepthMap
    n_neighbors: int
    omega: np.ndarray  # valid reference pixels

    @property
    def pass_fraction(self) -> float:
        return float(self.mask[self.omega].mean()) if self.omega.any() else 0.0

    @property
    def mean_confidence(self) -> float:
        return float(self.confidence[self.omega].mean()) if self.omega.any() else 0.0


@dataclass
class FrameSet:
    """A reference view and its ``N`` neighbors under one shared camera."""

    reference: Frame
    neighbors: list[Frame]
    K: CameraIntrinsics

    def __post_init__(self):
        if len(self.neighbors) < 1:
            raise InvalidInputError("a frame set needs at least one neighbor")
        shape = self.reference.depth.shape
        for f in self.neighbors:
            if f.depth.shape != shape:
                raise InvalidInputError("all depth maps must share one resolution")
        if shape != (self.K.height, self.K.width):
            raise InvalidInputError("depth resolution does not match the intrinsics")

    @property
    def n(self) -> int:
        return len(self.neighbors)


@dataclass
class CheckResult:
    """Outcome of checking reference pixels against one neighbor."""

    consistent: np.ndarray
    forward_pass: np.ndarray
    backward_pass: np.ndarray
    forward_error: np.ndarray
    reproj_error: np.ndarray
    backward_depth_error: np.ndarray
    u_src: np.ndarray
    v_src: np.ndarray
    d_src: np.ndarray
    landed: np.ndarray


def check_pixels(
    u: np.ndarray,
    v: np.ndarray,
    d_ref: np.ndarray,
    ref_valid: np.ndarray,
    ref_pose: PoseSE3,
    src_depth: DepthMap,
    src_pose: PoseSE3,
    K: CameraIntrinsics,
    thr: VotingThresholds,
) -> CheckResult:
    """Forward and backward consistency for arbitrary arrays of reference pixels."""
    d_safe = np.where(ref_valid, d_ref, 1.0)

    x, y, z = unproject_array(u, v, d_safe, K)
    xw, yw, zw = rigid_apply_inverse(ref_pose.rotation, ref_pose.translation, x, y, z)
    xs, ys, zs = rigid_apply(src_pose.rotation, src_pose.translation, xw, yw, zw)
    u_src, v_src, front = project_array(xs, ys, zs, K)
    d_src, ok_src = bilinear_sample_array(src_depth.values, src_depth.valid, u_src, v_src)
    landed = ref_valid & front & ok_src

    zs_safe = np.where(landed, zs, 1.0)
    fwd_err = np.abs(d_src - zs_safe) / zs_safe
    fwd = landed & (fwd_err < thr.tau_depth)

    d_src_safe = np.where(landed, d_src, 1.0)
    bx, by, bz = unproject_array(u_src, v_src, d_src_safe, K)
    bxw, byw, bzw = rigid_apply_inverse(src_pose.rotation, src_pose.translation, bx, by, bz)
    rx, ry, rz = rigid_apply(ref_pose.rotation, ref_pose.translation, bxw, byw, bzw)
    u_back, v_back, back_front = project_array(rx, ry, rz, K)
    du = u_back - u
    dv = v_back - v
    e_reproj = np.sqrt(du * du + dv * dv)
    bwd_depth_err = np.abs(rz - d_safe) / d_safe
    back_ok = landed & back_front
    bwd = back_ok & (e_reproj < thr.tau_reproj) & (bwd_depth_err < thr.tau_depth)

    return CheckResult(
        consistent=fwd & bwd,
        forward_pass=fwd,
        backward_pass=bwd,
        forward_error=np.where(landed, fwd_err, np.inf),
        reproj_error=np.where(back_ok, e_reproj, np.inf),
        backward_depth_error=np.where(back_ok, bwd_depth_err, np.inf),
        u_src=u_src,
        v_src=v_src,
        d_src=d_src,
        landed=landed,
    )


def check_neighbor(
    ref_depth: DepthMap,
    ref_pose: PoseSE3,
    src_depth: DepthMap,
    src_pose: PoseSE3,
    K: CameraIntrinsics,
    thr: VotingThresholds,
) -> CheckResult:
    """Run both checks for every pixel of the reference depth map."""
    u, v = pixel_grid(*ref_depth.shape)
    return check_pixels(u, v, ref_depth.values, ref_depth.valid, ref_pose, src_depth, src_pose, K, thr)


def _check_one(pixel, frames: FrameSet, i: int, thr: VotingThresholds) -> CheckResult:
    u, v = int(pixel[0]), int(pixel[1])
    ref = frames.reference.depth
    nb = frames.neighbors[i]
    return check_pixels(
        np.array([float(u)]),
        np.array([float(v)]),
        ref.values[v : v + 1, u],
        ref.valid[v : v + 1, u],
        frames.reference.pose,
        nb.depth,
        nb.pose,
        frames.K,
        thr,
    )


def forward_check(pixel, frames: FrameSet, i: int, thr: VotingThresholds) -> tuple[bool, float]:
    """Forward depth test of one reference pixel against neighbor ``i``.

    Returns ``(passed, relative_error)``; the error is ``inf`` when the
    projection leaves the image, falls behind the camera or hits invalid depth.
    """
    res = _check_one(pixel, frames, i, thr)
    return bool(res.forward_pass[0]), float(res.forward_error[0])


def backward_check(pixel, frames: FrameSet, i: int, thr: VotingThresholds) -> tuple[bool, float]:
    """Backward reprojection test; returns ``(passed, e_reproj)`` in pixels."""
    res = _check_one(pixel, frames, i, thr)
    return bool(res.backward_pass[0]), float(res.reproj_error[0])


def bidirectional_consistency(pixel, frames: FrameSet, i: int, thr: VotingThresholds) -> int:
    return int(_check_one(pixel, frames, i, thr).consistent[0])


def vote(frames: FrameSet, thr: VotingThresholds) -> VoteMap:
    ref = frames.reference
    votes = np.zeros(ref.depth.shape, dtype=np.int64)
    for nb in frames.neighbors:
        res = check_neighbor(ref.depth, ref.pose, nb.depth, nb.pose, frames.K, thr)
        votes += res.consistent
    n = frames.n
    mask = (votes >= thr.m_vote) & ref.depth.valid
    return VoteMap(
        votes=votes,
        confidence=votes / n,
        mask=mask,
        filtered=ref.depth.masked(mask),
        n_neighbors=n,
        omega=ref.depth.valid.copy(),
    )


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def vote_loss(vote_map: VoteMap, thr: VotingThresholds) -> float:
    """Soft fraction of pixels failing the vote: ``1 - mean(s((V - m) / tau_m))``."""
    omega = vote_map.omega
    if not omega.any():
        raise InvalidInputError("vote loss needs at least one valid pixel")
    x = (vote_map.votes[omega] - thr.m_vote) / thr.tau_m
    return float(1.0 - _logistic(x).mean())


def select_neighbors(
    poses: list[PoseSE3], ref_index: int, k: int = 8, min_angle_deg: float = 2.0
) -> list[int]:
    """k nearest frames by camera-center distance, skipping near-identical views.

    Frames whose optical axis differs from the reference by less than
    ``min_angle_deg`` are skipped since they add no parallax.
    """
    ref = poses[ref_index]
    c0, a0 = ref.center, ref.optical_axis
    cands = []
    for j, p in enumerate(poses):
        if j == ref_index:
            continue
        cos = float(np.clip(a0 @ p.optical_axis, -1.0, 1.0))
        if np.degrees(np.arccos(cos)) < min_angle_deg:
            continue
        cands.append((float(np.linalg.norm(p.center - c0)), j))
    cands.sort()
    return [j for _, j in cands[:k]]


def vote_frame(
    frames: list[Frame],
    index: int,
    K: CameraIntrinsics,
    thr: VotingThresholds,
    k: int = 8,
    min_angle_deg: float = 2.0,
) -> VoteMap:
    """Vote frame ``index`` of a sequence against its selected neighbors."""
    nbrs = select_neighbors([f.pose for f in frames], index, k, min_angle_deg)
    if not nbrs:
        raise InvalidInputError(f"frame {index} has no usable neighbors")
    return vote(FrameSet(frames[index], [frames[j] for j in nbrs], K), thr)
