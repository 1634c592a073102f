"""Outer refinement loop: BA, re-vote, refresh stereo depth, fuse, anneal."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, Frame, InvalidInputError, PoseSE3
from .metrics import pose_errors
from .robust_ba import BAConfig, DegenerateGeometryError, all_pairs, make_window, solve_local_ba, upsample_depth
from .voting import VoteMap, VotingThresholds, check_neighbor, select_neighbors, vote, vote_loss
from .voting import FrameSet

logger = logging.getLogger(__name__)

# regenerator(iteration, poses, current D^obs) -> refreshed stereo depth per frame
Regenerator = Callable[[int, list, list], list]


@dataclass(frozen=True)
class RefinementSchedule:
    beta: float = 0.3
    alpha: float = 0.9
    iterations: int = 5
    floor_depth: float = 0.01
    floor_reproj: float = 0.5
    pose_tol: float = 1e-5
    pass_tol: float = 1e-3
    early_exit: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidInputError("beta must lie in [0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError("alpha must lie in (0, 1]")
        if self.floor_depth <= 0 or self.floor_reproj <= 0:
            raise InvalidInputError("threshold floors must be positive")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be non-negative")


@dataclass
class SupervisionState:
    iteration: int
    d_obs: list
    thresholds: VotingThresholds
    votes: list
    d_st: list


def fuse_supervision(state: SupervisionState, schedule: RefinementSchedule) -> list:
    """Blend refreshed stereo depth into ``D^obs`` where the vote mask holds.

    Pixels outside the mask are returned untouched, and so is every pixel
    where the refreshed depth is invalid. The valid mask never grows.
    """
    b = schedule.beta
    out = []
    for d, st, vm in zip(state.d_obs, state.d_st, state.votes):
        upd = vm.mask & d.valid & st.valid
        vals = d.values.copy()
        vals[upd] = (1.0 - b) * d.values[upd] + b * st.values[upd]
        out.append(DepthMap(vals, d.valid.copy(), d.frame_id))
    return out


def anneal_thresholds(thr: VotingThresholds, schedule: RefinementSchedule) -> VotingThresholds:
    return replace(
        thr,
        tau_depth=max(schedule.floor_depth, schedule.alpha * thr.tau_depth),
        tau_reproj=max(schedule.floor_reproj, schedule.alpha * thr.tau_reproj),
    )


def vote_all(depths, poses, K: CameraIntrinsics, thr: VotingThresholds, k: int = 8) -> list:
    """Vote every frame against its ``k`` nearest neighbors."""
    frames = [Frame(None, d, p, i) for i, (d, p) in enumerate(zip(depths, poses))]
    out = []
    for i in range(len(frames)):
        nbrs = select_neighbors(poses, i, k)
        if not nbrs:
            raise InvalidInputError(f"frame {i} has no usable neighbors")
        out.append(vote(FrameSet(frames[i], [frames[j] for j in nbrs], K), thr))
    return out


def mean_vote_loss(votes, thr: VotingThresholds) -> float:
    return float(np.mean([vote_loss(v, thr) for v in votes]))


def mean_pass_fraction(votes) -> float:
    return float(np.mean([v.pass_fraction for v in votes]))


def cross_view_discrepancy(depths, poses, K: CameraIntrinsics, k: int = 4) -> float:
    """Median relative depth disagreement between each frame and its neighbors."""
    thr = VotingThresholds()
    errs = []
    for i in range(len(depths)):
        for j in select_neighbors(poses, i, k):
            res = check_neighbor(depths[i], poses[i], depths[j], poses[j], K, thr)
            errs.append(res.forward_error[res.landed])
    e = np.concatenate(errs) if errs else np.zeros(0)
    return float(np.median(e)) if e.size else float("nan")


def chain_windows(n: int, size: int | None) -> list:
    """Consecutive windows sharing one frame, so each window's first frame anchors it."""
    if size is None or size >= n:
        return [list(range(n))]
    if size < 2:
        raise InvalidInputError("window size must be at least 2")
    wins, start = [], 0
    while start < n - 1:
        wins.append(list(range(start, min(start + size, n))))
        start += size - 1
    return wins


@dataclass
class ChainResult:
    poses: list
    d_pred: list  # full-resolution upsampled predicted depths
    energies: list
    iterations: int


def chain_local_ba(
    images,
    poses,
    d_obs,
    confidences,
    K: CameraIntrinsics,
    cfg: BAConfig = BAConfig(),
    thr: VotingThresholds = VotingThresholds(),
    window_size: int | None = None,
    stride: int = 4,
    max_gap: int | None = 2,
) -> ChainResult:
    """Local BA over consecutive overlapping windows.

    The first window fixes frame 0; later windows fix their first frame,
    already refined by the previous window.
    """
    poses = list(poses)
    n = len(poses)
    d_pred = [None] * n
    energies, iters = [], 0
    for w in chain_windows(n, window_size):
        edges = all_pairs(len(w), max_gap)
        win = make_window([images[k] for k in w], [poses[k] for k in w], [d_obs[k] for k in w],
                          [confidences[k] for k in w], K, stride, frame_ids=w, edges=edges)
        try:
            res = solve_local_ba(win, cfg, thr)
        except DegenerateGeometryError:
            raise
        for k, f in zip(w, res.window.frames):
            poses[k] = f.pose
            d_pred[k] = upsample_depth(np.where(f.omega, f.d_pred, 0.0), stride, (K.height, K.width))
        energies.append(res.history[-1].e_total)
        iters += res.iterations
    return ChainResult(poses, d_pred, energies, iters)


@dataclass
class IterationReport:
    iteration: int
    pass_fraction: float
    pass_fraction_original: float
    l_vote: float
    tau_depth: float
    tau_reproj: float
    pose_increment: float
    discrepancy: float
    rot_err_deg: float | None = None
    trans_err: float | None = None
    ba_energy: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RefinementResult:
    poses: list
    d_obs: list
    reports: list
    state: SupervisionState
    converged_early: bool = False


def _pose_delta(a, b) -> float:
    """Largest rotation (rad) or translation change between two trajectories."""
    worst = 0.0
    for p, q in zip(a, b):
        rot_deg, _ = pose_errors(p, q)
        worst = max(worst, np.radians(rot_deg), float(np.linalg.norm(p.translation - q.translation)))
    return worst


def run_refinement(
    images,
    poses,
    d_obs,
    K: CameraIntrinsics,
    schedule: RefinementSchedule = RefinementSchedule(),
    ba_cfg: BAConfig = BAConfig(),
    thr: VotingThresholds = VotingThresholds(),
    regenerator: Regenerator | None = None,
    gt_poses=None,
    window_size: int | None = None,
    stride: int = 4,
    max_gap: int | None = 2,
    k_neighbors: int = 8,
) -> RefinementResult:
    """Alternate local BA, re-voting, stereo refresh, fusion and annealing.

    Without a ``regenerator`` the refreshed depth equals the current
    ``D^obs`` and fusion is the identity. Iteration 0 of the report
    describes the input; each later entry follows one full round.
    """
    n = len(images)
    if n < 2:
        raise InvalidInputError("refinement needs at least two frames")
    thr0 = thr
    poses = list(poses)
    d_obs = list(d_obs)
    votes = vote_all(d_obs, poses, K, thr, k_neighbors)
    votes0 = votes

    def report(t, votes, thr_t, inc, energy=None):
        vo = votes if thr_t == thr0 else vote_all(d_obs, poses, K, thr0, k_neighbors)
        r = IterationReport(
            iteration=t,
            pass_fraction=mean_pass_fraction(votes),
            pass_fraction_original=mean_pass_fraction(vo),
            l_vote=mean_vote_loss(votes, thr_t),
            tau_depth=thr_t.tau_depth,
            tau_reproj=thr_t.tau_reproj,
            pose_increment=inc,
            discrepancy=cross_view_discrepancy(d_obs, poses, K),
            ba_energy=energy,
        )
        if gt_poses is not None:
            errs = [pose_errors(p, g) for p, g in zip(poses, gt_poses)]
            r.rot_err_deg = float(max(e[0] for e in errs))
            r.trans_err = float(max(e[1] for e in errs))
        return r

    reports = [report(0, votes0, thr, 0.0)]
    state = SupervisionState(0, d_obs, thr, votes, list(d_obs))
    early = False
    for t in range(1, schedule.iterations + 1):
        confs = [v.confidence for v in votes]
        try:
            chain = chain_local_ba(images, poses, d_obs, confs, K, ba_cfg, thr, window_size, stride, max_gap)
        except DegenerateGeometryError as exc:
            raise DegenerateGeometryError(f"refinement iteration {t}: {exc}", exc.frame_ids) from exc
        inc = _pose_delta(chain.poses, poses)
        poses = chain.poses
        votes = vote_all(d_obs, poses, K, thr, k_neighbors)
        d_st = list(d_obs) if regenerator is None else list(regenerator(t, poses, d_obs))
        state = SupervisionState(t, d_obs, thr, votes, d_st)
        d_obs = fuse_supervision(state, schedule)
        prev_pass = reports[-1].pass_fraction
        thr = anneal_thresholds(thr, schedule)
        votes = vote_all(d_obs, poses, K, thr, k_neighbors)
        state = SupervisionState(t, d_obs, thr, votes, d_st)
        rep = report(t, votes, thr, inc, float(sum(chain.energies)))
        reports.append(rep)
        logger.info(
            "refine %d: pass %.4f (orig %.4f) disc %.3g step %.2g",
            t, rep.pass_fraction, rep.pass_fraction_original, rep.discrepancy, inc,
        )
        if schedule.early_exit and inc < schedule.pose_tol and abs(rep.pass_fraction - prev_pass) < schedule.pass_tol:
            early = True
            break
    return RefinementResult(poses, d_obs, reports, state, early)
