import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from conftest import random_pose
from mvcg.geometry import DepthMap, InvalidInputError, PoseSE3
from mvcg.metrics import (
    PSNR_CAP,
    InsufficientDataError,
    MeshDistance,
    TriangleMesh,
    Trajectory,
    ate,
    depth_errors,
    f1_score,
    mesh_errors,
    pose_errors,
    psnr,
    psnr_converged,
    report_dict,
    rpe,
    umeyama,
)
from oracles import closest_point_on_triangle


def _from_centers(centers, rng=None):
    out = []
    for c in centers:
        R = np.eye(3) if rng is None else Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
        out.append(PoseSE3(R, -R @ np.asarray(c, float)))
    return out


@pytest.fixture
def traj(rng):
    return _from_centers(rng.uniform(-1, 1, (10, 3)), rng)


def test_ate_identical_and_rigid_offset(traj, rng):
    assert ate(traj, traj) == pytest.approx(0.0, abs=1e-12)
    G = random_pose(rng, 1.0, 1.0)
    moved = [p @ G for p in traj]
    assert ate(moved, traj) == pytest.approx(0.0, abs=1e-9)
    shifted = [p @ PoseSE3(np.eye(3), -np.array([1.0, 0, 0])) for p in traj]
    np.testing.assert_allclose(shifted[0].center - traj[0].center, [1, 0, 0], atol=1e-12)
    assert ate(shifted, traj) == pytest.approx(0.0, abs=1e-9)


def _brute_force_ate(src, dst):
    """Minimize the alignment RMSE over rotations directly, from many starts."""

    def cost(rv):
        R = Rotation.from_rotvec(rv).as_matrix()
        t = dst.mean(0) - R @ src.mean(0)
        r = dst - (src @ R.T + t)
        return np.sqrt((r**2).sum(1).mean())

    best = np.inf
    grid = np.linspace(-np.pi / 2, np.pi / 2, 5)
    for a in grid:
        for b in grid:
            for c in grid:
                res = minimize(cost, [a, b, c], method="Nelder-Mead", options=dict(xatol=1e-12, fatol=1e-14, maxiter=4000))
                best = min(best, res.fun)
    return best


def test_ate_against_brute_force_alignment():
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]])
    est = gt.copy()
    est[2] += [0.0, 0.0, 0.3]
    value = ate(_from_centers(est), _from_centers(gt))
    assert value > 0.01  # alignment absorbs most of the offset
    assert value == pytest.approx(_brute_force_ate(est, gt), abs=1e-6)


def test_ate_needs_three_frames(traj):
    with pytest.raises(InsufficientDataError):
        ate(traj[:2], traj[:2])
    with pytest.raises(InvalidInputError):
        ate(traj, traj, alignment="affine")


def test_ate_similarity_absorbs_scale(traj):
    scaled = _from_centers([2.5 * p.center for p in traj])
    assert ate(scaled, _from_centers([p.center for p in traj]), "similarity") == pytest.approx(0.0, abs=1e-9)


def test_umeyama_recovers_similarity(rng):
    src = rng.normal(size=(20, 3))
    R = Rotation.random(random_state=1).as_matrix()
    dst = 1.7 * src @ R.T + [0.3, -1, 2]
    s, R2, t = umeyama(src, dst, with_scale=True)
    assert s == pytest.approx(1.7)
    np.testing.assert_allclose(R2, R, atol=1e-12)


def test_rpe_constant_extra_rotation():
    step = Rotation.from_rotvec(np.radians(1.0) * np.array([0.0, 0.0, 1.0])).as_matrix()
    gt, est = [], []
    R = np.eye(3)
    for i in range(8):
        t = np.array([0.1 * i, 0.0, 1.0])
        gt.append(PoseSE3(np.eye(3), t))
        est.append(PoseSE3(R.copy(), t))
        R = step @ R
    rte, rre = rpe(est, gt)
    assert rre == pytest.approx(1.0, abs=1e-9)
    assert rpe(gt, gt) == (0.0, 0.0)


def test_rpe_invariant_to_global_transform(traj, rng):
    noisy = [p.retract(rng.normal(0, 0.01, 6)) for p in traj]
    G = random_pose(rng, 1.0, 2.0)
    a = rpe(noisy, traj)
    b = rpe([p @ G for p in noisy], traj)
    c = rpe(noisy, [p @ G for p in traj])
    np.testing.assert_allclose(a, b, atol=1e-9)
    np.testing.assert_allclose(a, c, atol=1e-9)
    with pytest.raises(InsufficientDataError):
        rpe(traj[:2], traj[:2], delta=2)


def test_trajectory_matching_by_id(traj):
    est = Trajectory([5, 3, 1, 0], [traj[5], traj[3], traj[1], traj[0]])
    gt = Trajectory(list(range(10)), traj)
    assert ate(est, gt) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(InvalidInputError):
        Trajectory([0, 0], traj[:2])


def _dm(v):
    v = np.asarray(v, float)
    return DepthMap(v, v > 0)


def test_depth_errors_examples(rng):
    gt = rng.uniform(1, 3, (10, 10))
    s = depth_errors(_dm(gt), _dm(gt))
    assert s.absrel == 0.0 and s.delta_fraction == 1.0
    assert depth_errors(_dm(2 * gt), _dm(gt)).absrel == pytest.approx(0.0, abs=1e-15)
    f = np.where(np.arange(100).reshape(10, 10) % 2 == 0, 1.03, 1.10)
    s = depth_errors(_dm(gt * f), _dm(gt), align=None)
    assert s.absrel == pytest.approx(0.065, abs=1e-12)
    assert s.delta_fraction == 0.5
    assert s.count == 100


def test_depth_errors_scale_invariance_and_errors(rng):
    gt = rng.uniform(1, 3, (8, 8))
    pred = gt * rng.uniform(0.9, 1.1, gt.shape)
    a = depth_errors(_dm(pred), _dm(gt))
    b = depth_errors(_dm(3.7 * pred), _dm(gt))
    assert a.absrel == pytest.approx(b.absrel, rel=1e-12)
    with pytest.raises(InsufficientDataError):
        depth_errors(_dm(np.zeros((2, 2))), _dm(np.ones((2, 2))))
    one_sided = depth_errors(_dm(gt * 1.049), _dm(gt), align=None, symmetric=False)
    assert one_sided.delta_fraction == 1.0
    assert depth_errors(_dm(gt / 1.049), _dm(gt), align=None, symmetric=True).delta_fraction == 1.0


@pytest.mark.parametrize("acc, rec, f1", [(82.60, 71.49, 76.64), (97.86, 86.67, 91.93)])
def test_f1_reference_rows(acc, rec, f1):
    assert round(f1_score(acc, rec), 2) == f1


def test_f1_edge_cases():
    assert f1_score(0, 0) == 0.0
    assert f1_score(100, 100) == 100.0


def _grid_mesh(n=10, size=0.2, z=0.0):
    x = np.linspace(0, size, n + 1)
    X, Y = np.meshgrid(x, x, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    return TriangleMesh(v, np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)]))


def test_mesh_errors_identical():
    m = _grid_mesh()
    s = mesh_errors(m, m)
    assert s.accuracy == 100.0 and s.recall == 100.0 and s.f1 == 100.0
    assert s.chamfer_mm < 0.1


def test_mesh_errors_offset_plane():
    a, b = _grid_mesh(), _grid_mesh(z=0.002)
    s = mesh_errors(a, b, sigma_mm=2.5, n_samples=20000)
    assert s.accuracy == 100.0 and s.recall == 100.0
    assert s.chamfer_mm == pytest.approx(2.0, abs=1e-6)
    s = mesh_errors(a, b, sigma_mm=1.5, n_samples=20000)
    assert s.accuracy == 0.0 and s.f1 == 0.0


def test_mesh_errors_swap_symmetry():
    a = _grid_mesh()
    b = _grid_mesh(n=7, size=0.15, z=0.001)  # partial overlap
    ab = mesh_errors(a, b, n_samples=100_000)
    ba = mesh_errors(b, a, n_samples=100_000)
    assert ab.chamfer_mm == pytest.approx(ba.chamfer_mm, rel=0.02)
    assert ab.accuracy == pytest.approx(ba.recall, abs=0.5)
    assert ab.recall == pytest.approx(ba.accuracy, abs=0.5)


def test_mesh_errors_need_meshes():
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    with pytest.raises(InsufficientDataError):
        mesh_errors(empty, _grid_mesh())


def test_mesh_distance_matches_brute_force(rng):
    m = _grid_mesh(n=4)
    m.vertices[:, 2] = rng.uniform(0, 0.02, len(m.vertices))
    pts = rng.uniform([-0.05, -0.05, -0.05], [0.25, 0.25, 0.07], (200, 3))
    fast = MeshDistance(m, k=len(m.triangles))(pts)
    tri = m.vertices[m.triangles]
    slow = [min(np.linalg.norm(p - closest_point_on_triangle(p, *t)) for t in tri) for p in pts]
    np.testing.assert_allclose(fast, slow, atol=1e-9)


def test_mesh_validation():
    with pytest.raises(InvalidInputError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(InvalidInputError):
        TriangleMesh([[np.nan, 0, 0]] * 3, [[0, 1, 2]])


def test_psnr():
    a = np.full((4, 4, 3), 0.5)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    with pytest.raises(InvalidInputError):
        psnr(a, a[:2])


def test_psnr_stop_rule():
    assert psnr_converged(35.0) and not psnr_converged(34.999)


def test_report_keys():
    assert list(report_dict()) == ["ATE", "RTE", "RRE", "absrel", "delta_5", "acc", "rec", "f1", "chamfer_mm", "psnr"]


def test_pose_errors(rng):
    p = random_pose(rng, 1.0, 1.0)
    q = PoseSE3(Rotation.from_rotvec([0, 0, np.radians(2.0)]).as_matrix(), np.zeros(3)) @ p
    r, t = pose_errors(q, p)
    assert r == pytest.approx(2.0) and t == pytest.approx(np.linalg.norm(q.center - p.center))
