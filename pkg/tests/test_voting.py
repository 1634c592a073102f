import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvcg.geometry import DepthMap, Frame, InvalidInputError, PoseSE3, se3_exp
from mvcg.harness import plane_scene, render_gt
from mvcg.voting import (
    FrameSet,
    VoteMap,
    VotingThresholds,
    backward_check,
    bidirectional_consistency,
    check_neighbor,
    forward_check,
    select_neighbors,
    vote,
    vote_loss,
)

from oracles import brute_force_vote, consistent_pixel


@pytest.fixture(scope="module")
def plane():
    scene = plane_scene(n_views=3)
    depths = [render_gt(scene, v)[1] for v in range(3)]
    return scene, depths


def _frameset(depth, pose, others, K):
    return FrameSet(Frame(None, depth, pose, 0), [Frame(None, d, p, i + 1) for i, (d, p) in enumerate(others)], K)


def _vm(votes, n, m_vote=3):
    votes = np.asarray(votes)
    omega = np.ones(votes.shape, bool)
    return VoteMap(votes, votes / n, votes >= m_vote, DepthMap(np.ones(votes.shape)), n, omega)


def test_identical_neighbor_passes_with_zero_error(plane):
    scene, depths = plane
    fs = _frameset(depths[0], scene.poses[0], [(depths[0], scene.poses[0])], scene.K)
    ok, err = forward_check((40, 30), fs, 0, VotingThresholds())
    assert ok and err == 0.0
    ok, e = backward_check((40, 30), fs, 0, VotingThresholds())
    assert ok and e == 0.0
    assert bidirectional_consistency((40, 30), fs, 0, VotingThresholds()) == 1


def test_scaled_reference_depth_fails_forward(plane):
    # reference 10% deeper than the (co-located) neighbor: |d - 1.1 d| / (1.1 d)
    scene, depths = plane
    ref = DepthMap(depths[0].values * 1.10)
    fs = _frameset(ref, scene.poses[0], [(depths[0], scene.poses[0])], scene.K)
    ok, err = forward_check((40, 30), fs, 0, VotingThresholds(tau_depth=0.05))
    assert not ok
    assert err == pytest.approx(0.1 / 1.1, rel=1e-12)


def test_scaled_neighbor_depth_error(plane):
    scene, depths = plane
    fs = _frameset(depths[0], scene.poses[0], [(DepthMap(depths[0].values * 1.10), scene.poses[0])], scene.K)
    ok, err = forward_check((40, 30), fs, 0, VotingThresholds(tau_depth=0.05))
    assert not ok and err == pytest.approx(0.1, rel=1e-12)


def test_out_of_frustum_fails(plane):
    scene, depths = plane
    far = PoseSE3(np.eye(3), scene.poses[0].translation - np.array([5.0, 0.0, 0.0]))
    fs = _frameset(depths[0], scene.poses[0], [(depths[0], far)], scene.K)
    ok, err = forward_check((10, 10), fs, 0, VotingThresholds())
    assert not ok and math.isinf(err)


def test_backward_depth_ratio_fails_with_zero_reprojection(plane):
    scene, depths = plane
    nb = DepthMap(depths[0].values * 1.08)
    res = check_neighbor(depths[0], scene.poses[0], nb, scene.poses[0], scene.K, VotingThresholds(tau_depth=0.05))
    px = (30, 40)
    assert res.reproj_error[px] == pytest.approx(0.0, abs=1e-9)
    assert res.backward_depth_error[px] == pytest.approx(0.08, rel=1e-9)
    assert not res.backward_pass[px] and not res.consistent[px]


def test_plane_translated_neighbor_matches_oracle(plane):
    scene, depths = plane
    thr = VotingThresholds(tau_reproj=1.0)
    ref_pose = scene.poses[0]
    # the neighbor's estimated pose sits 1 cm off its true value
    off = PoseSE3(scene.poses[1].rotation, scene.poses[1].translation + np.array([0.01, 0.0, 0.0]))
    res = check_neighbor(depths[0], ref_pose, depths[1], off, scene.K, thr)
    K = scene.K
    expect = np.zeros(depths[0].shape, bool)
    for v in range(K.height):
        for u in range(K.width):
            if depths[0].valid[v, u]:
                expect[v, u] = consistent_pixel(
                    float(u), float(v), depths[0].values[v, u], ref_pose.rotation, ref_pose.translation,
                    depths[1].values, depths[1].valid, off.rotation, off.translation,
                    K.fx, K.fy, K.cx, K.cy, thr.tau_depth, thr.tau_reproj,
                )
    np.testing.assert_array_equal(res.consistent, expect)
    assert 0 < expect.mean() < 1  # the check is not trivially all-pass or all-fail


def test_vote_identical_neighbors(plane):
    scene, depths = plane
    fs = _frameset(depths[0], scene.poses[0], [(depths[0], scene.poses[0])] * 4, scene.K)
    vm = vote(fs, VotingThresholds())
    valid = depths[0].valid
    assert (vm.votes[valid] == 4).all()
    assert (vm.confidence[valid] == 1.0).all()
    assert vm.mask[valid].all()
    np.testing.assert_array_equal(vm.filtered.values, depths[0].values)


def test_vote_matches_oracle_three_views(plane):
    scene, depths = plane
    thr = VotingThresholds(m_vote=1)
    others = [(depths[1], scene.poses[1]), (depths[2], scene.poses[2])]
    vm = vote(_frameset(depths[0], scene.poses[0], others, scene.K), thr)
    V, conf, M, filt, l = brute_force_vote(depths[0], scene.poses[0], others, scene.K, thr)
    np.testing.assert_array_equal(vm.votes, V)
    np.testing.assert_array_equal(vm.confidence, conf)
    np.testing.assert_array_equal(vm.mask, M)
    np.testing.assert_array_equal(vm.filtered.values, filt)
    assert abs(vote_loss(vm, thr) - l) < 1e-9


def test_confidence_is_votes_over_n():
    vm = _vm([[3]], 4)
    assert vm.confidence[0, 0] == 0.75


def test_resolution_mismatch():
    K = plane_scene().K
    a = DepthMap(np.ones((K.height, K.width)))
    b = DepthMap(np.ones((K.height, K.width - 1)))
    with pytest.raises(InvalidInputError):
        _frameset(a, PoseSE3.identity(), [(b, PoseSE3.identity())], K)


def test_vote_loss_at_threshold():
    assert vote_loss(_vm(np.full((4, 4), 3), 8), VotingThresholds()) == pytest.approx(0.5)


def test_vote_loss_far_above_threshold():
    thr = VotingThresholds(m_vote=3, tau_m=0.5)
    vm = _vm(np.full((2, 2), 8), 8)  # V - m = 10 tau_m
    assert vote_loss(vm, thr) == pytest.approx(1.0 - 1.0 / (1.0 + math.exp(-10.0)), rel=1e-12)
    assert vote_loss(vm, thr) == pytest.approx(4.54e-5, rel=1e-3)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_vote_loss_symmetric_halves(k):
    votes = np.array([[3 + k, 3 - k]])
    assert vote_loss(_vm(votes, 8), VotingThresholds(tau_m=1.0)) == pytest.approx(0.5, abs=1e-15)


def test_vote_loss_empty_domain():
    vm = VoteMap(np.zeros((2, 2), int), np.zeros((2, 2)), np.zeros((2, 2), bool), DepthMap(np.zeros((2, 2))), 4,
                 np.zeros((2, 2), bool))
    with pytest.raises(InvalidInputError):
        vote_loss(vm, VotingThresholds())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 8), min_size=1, max_size=30), st.integers(0, 29))
def test_vote_loss_strictly_decreasing(votes, idx):
    votes = np.array([votes])
    idx %= votes.size
    if votes[0, idx] == 8:
        return
    thr = VotingThresholds()
    up = votes.copy()
    up[0, idx] += 1
    a, b = vote_loss(_vm(votes, 8), thr), vote_loss(_vm(up, 8), thr)
    assert 0.0 < b < a < 1.0


@pytest.mark.parametrize("field", ["tau_depth", "tau_reproj", "tau_m"])
def test_thresholds_validate(field):
    with pytest.raises(InvalidInputError):
        VotingThresholds(**{field: 0.0})


@settings(max_examples=15, deadline=None)
@given(st.floats(0.002, 0.05), st.floats(1.0, 2.0), st.floats(0.2, 2.0), st.floats(1.0, 2.0))
def test_loosening_never_removes_votes(tau_d, grow_d, tau_r, grow_r):
    ds = _noisy_dataset()
    K = ds.scene.K
    frames = [Frame(None, d, p, i) for i, (d, p) in enumerate(zip(ds.depths, ds.init_poses))]
    fs = FrameSet(frames[0], frames[1:5], K)
    tight = vote(fs, VotingThresholds(tau_depth=tau_d, tau_reproj=tau_r))
    loose = vote(fs, VotingThresholds(tau_depth=tau_d * grow_d, tau_reproj=tau_r * grow_r))
    assert (loose.votes >= tight.votes).all()


_CACHE = {}


def _noisy_dataset():
    if "ds" not in _CACHE:
        from mvcg.harness import ArtifactSpec, make_dataset, tabletop_scene

        _CACHE["ds"] = make_dataset(tabletop_scene(n_views=6), ArtifactSpec(noise_std=0.003, floater_count=5),
                                    rot_std_deg=0.3, trans_std_frac=0.003)
    return _CACHE["ds"]


def test_self_consistency_and_rigid_invariance():
    ds = _noisy_dataset()
    K = ds.scene.K
    thr = VotingThresholds()
    ref = Frame(None, ds.depths[0], ds.init_poses[0])
    selfs = vote(FrameSet(ref, [ref] * 5, K), thr)
    assert (selfs.votes[ds.depths[0].valid] == 5).all()

    frames = [Frame(None, d, p, i) for i, (d, p) in enumerate(zip(ds.depths, ds.init_poses))]
    base = vote(FrameSet(frames[0], frames[1:], K), thr)
    g = se3_exp([0.3, -0.2, 0.5, 0.2, 0.1, -0.4])
    moved = [Frame(None, f.depth, f.pose @ g.inverse(), f.frame_id) for f in frames]
    other = vote(FrameSet(moved[0], moved[1:], K), thr)
    # a global rigid motion only perturbs the last floating-point bits
    assert (other.votes != base.votes).mean() < 1e-3
    assert abs(vote_loss(other, thr) - vote_loss(base, thr)) < 1e-3


def test_vote_invariants():
    ds = _noisy_dataset()
    frames = [Frame(None, d, p, i) for i, (d, p) in enumerate(zip(ds.depths, ds.init_poses))]
    thr = VotingThresholds()
    vm = vote(FrameSet(frames[0], frames[1:], ds.scene.K), thr)
    assert vm.votes.min() >= 0 and vm.votes.max() <= 5
    assert ((vm.confidence >= 0) & (vm.confidence <= 1)).all()
    np.testing.assert_array_equal(vm.mask, (vm.votes >= thr.m_vote) & ds.depths[0].valid)
    f = vm.filtered.values
    assert ((f == 0) | (f == ds.depths[0].values)).all()
    assert 0 < vote_loss(vm, thr) < 1


def test_select_neighbors_skips_parallel_views():
    poses = [PoseSE3.identity(), PoseSE3(np.eye(3), [0.01, 0, 0])]
    poses += [PoseSE3.look_at([np.cos(a), np.sin(a), 0.5], [0, 0, 0]) for a in np.linspace(0, 1, 5)]
    nb = select_neighbors(poses, 0, k=3)
    assert 1 not in nb and len(nb) == 3
