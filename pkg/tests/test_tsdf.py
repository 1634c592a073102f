import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvcg.geometry import CameraIntrinsics, DepthMap, InvalidInputError, PoseSE3
from mvcg.tsdf import (
    FROM_NONE,
    FROM_STEREO,
    FROM_TSDF,
    TSDFVolume,
    complete_depth,
    depth_bounds,
    extract_mesh,
    fuse_depths,
    render_depth,
)

K = CameraIntrinsics(80.0, 80.0, 39.5, 29.5, 80, 60)
VOX = 0.02


def _plane_depth(z=2.0):
    return DepthMap(np.full((K.height, K.width), z), np.ones((K.height, K.width), bool))


def _plane_volume():
    # voxel layers straddle z = 2 without landing on it
    return TSDFVolume((-0.4, -0.3, 1.505), (41, 31, 50), VOX)


def _zero_crossings(vol):
    """Interpolated z of the +/- sign change along each fully observed column."""
    s, w = vol.sdf, vol.weight
    out = []
    for i in range(vol.dims[0]):
        for j in range(vol.dims[1]):
            col, cw = s[i, j], w[i, j]
            k = np.flatnonzero((col[:-1] > 0) & (col[1:] <= 0) & (cw[:-1] > 0) & (cw[1:] > 0))
            if k.size:
                k = k[0]
                f = col[k] / (col[k] - col[k + 1])
                out.append(vol.origin[2] + VOX * (k + f))
    return np.array(out)


def test_plane_zero_crossing():
    vol = _plane_volume().integrate(_plane_depth(), PoseSE3.identity(), K)
    z = _zero_crossings(vol)
    assert len(z) == 41 * 31
    assert np.abs(z - 2.0).max() < VOX / 2


def test_integrating_twice_doubles_weights():
    a = _plane_volume().integrate(_plane_depth(), PoseSE3.identity(), K)
    b = a.copy().integrate(_plane_depth(), PoseSE3.identity(), K)
    np.testing.assert_array_equal(a.sdf, b.sdf)
    np.testing.assert_array_equal(b.weight, 2 * a.weight)


def test_voxels_far_behind_surface_untouched():
    vol = _plane_volume().integrate(_plane_depth(), PoseSE3.identity(), K)
    z = vol.voxel_centers()[..., 2]
    behind = z > 2.0 + vol.mu + 1e-9
    assert behind.any()
    assert (vol.weight[behind] == 0).all() and (vol.sdf[behind] == 1).all()
    assert (vol.weight[z < 2.0] == 1).all()


def test_integration_is_order_independent(rng):
    poses = [PoseSE3.look_at([x, 0.05 * x, 0.0], [0, 0, 2.0], up=(0, -1, 0)) for x in (-0.1, 0.0, 0.1)]
    depths = []
    for _ in poses:
        d = 2.0 + rng.normal(0, 0.01, (K.height, K.width))
        depths.append(DepthMap(d, np.ones(d.shape, bool)))
    a, b = _plane_volume(), _plane_volume()
    for k in (0, 1, 2):
        a.integrate(depths[k], poses[k], K)
    for k in (2, 0, 1):
        b.integrate(depths[k], poses[k], K)
    assert np.abs(a.sdf - b.sdf).max() < 1e-6
    np.testing.assert_array_equal(a.weight, b.weight)


@settings(max_examples=20, deadline=None)
@given(st.floats(1.6, 2.4), st.floats(0.0, 0.3), st.integers(0, 1000))
def test_volume_invariants(z0, noise, seed):
    rng = np.random.default_rng(seed)
    vals = z0 + noise * rng.normal(size=(K.height, K.width))
    valid = rng.uniform(size=vals.shape) > 0.2
    vol = _plane_volume().integrate(DepthMap(np.where(valid, vals, 0.0), valid), PoseSE3.identity(), K)
    assert np.abs(vol.sdf).max() <= 1.0
    assert vol.weight.min() >= 0


def test_volume_validation():
    with pytest.raises(InvalidInputError):
        TSDFVolume((0, 0, 0), (10, 10, 10), 0.01, mu=0.015)
    with pytest.raises(InvalidInputError):
        TSDFVolume((0, 0, 0), (1, 10, 10), 0.01)
    with pytest.raises(InvalidInputError):
        _plane_volume().integrate(DepthMap(np.ones((4, 4)), np.ones((4, 4), bool)), PoseSE3.identity(), K)


def _sphere_sdf(r=0.5):
    return lambda p: np.linalg.norm(p, axis=-1) - r


def _edge_counts(tri):
    e = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def test_sphere_mesh_is_accurate_and_closed():
    vol = TSDFVolume.from_function(_sphere_sdf(), [-0.6] * 3, [0.6] * 3, 0.01)
    mesh = extract_mesh(vol)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 0.5).max() < 0.005
    assert (_edge_counts(mesh.triangles) == 2).all()


def test_plane_sdf_mesh_is_flat():
    vol = TSDFVolume.from_function(lambda p: p[:, 2] - 0.123, [-0.2] * 3, [0.2] * 3, 0.01)
    mesh = extract_mesh(vol)
    assert not mesh.empty
    assert np.abs(mesh.vertices[:, 2] - 0.123).max() < 0.005


def test_empty_meshes():
    vol = TSDFVolume.from_function(lambda p: np.ones(len(p)), [0] * 3, [0.1] * 3, 0.01)
    assert extract_mesh(vol).empty
    assert extract_mesh(_plane_volume()).empty


def test_render_roundtrip_plane():
    vol = _plane_volume().integrate(_plane_depth(), PoseSE3.identity(), K)
    d = render_depth(vol, PoseSE3.identity(), K)
    # the volume spans a 0.8 x 0.6 m patch of the plane: 32 x 24 pixels
    assert d.valid.sum() >= 0.95 * 32 * 24
    err = np.abs(d.values[d.valid] - 2.0)
    assert np.mean(err <= VOX / 2) >= 0.99


def test_render_looking_away_is_empty():
    vol = _plane_volume().integrate(_plane_depth(), PoseSE3.identity(), K)
    away = PoseSE3.look_at([0, 0, 0], [0, 0, -1.0], up=(0, -1, 0))
    assert not render_depth(vol, away, K).valid.any()


def test_render_sphere_matches_ray_intersection():
    vol = TSDFVolume.from_function(_sphere_sdf(), [-0.6] * 3, [0.6] * 3, 0.01)
    pose = PoseSE3.look_at([0, 0, -2.0], [0, 0, 0], up=(0, -1, 0))
    d = render_depth(vol, pose, K)
    # closed-form ray/sphere hit in the camera frame; center at (0, 0, 2)
    v, u = np.mgrid[0 : K.height, 0 : K.width]
    ray = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(u.shape)], axis=-1)
    c = np.array([0.0, 0.0, 2.0])
    a = (ray * ray).sum(-1)
    b = -2 * (ray @ c)
    disc = b * b - 4 * a * (c @ c - 0.25)
    hit = disc > 0
    t = (-b - np.sqrt(np.where(hit, disc, 0))) / (2 * a)  # z-depth, since ray z = 1
    both = hit & d.valid
    assert both.sum() > 0.95 * hit.sum()
    assert np.abs(d.values[both] - t[both]).max() < 0.005


def test_completion_precedence(rng):
    shape = (6, 8)
    st_vals = rng.uniform(1, 2, shape)
    ts_vals = rng.uniform(3, 4, shape)
    full = np.ones(shape, bool)
    out = complete_depth(DepthMap(st_vals, full), DepthMap(ts_vals, full))
    np.testing.assert_array_equal(out.depth.values, st_vals)
    assert (out.provenance == FROM_STEREO).all()

    out = complete_depth(DepthMap(np.zeros(shape), ~full), DepthMap(ts_vals, full))
    np.testing.assert_array_equal(out.depth.values, ts_vals)
    assert (out.provenance == FROM_TSDF).all()

    checker = (np.indices(shape).sum(0) % 2).astype(bool)
    ts_valid = full.copy()
    ts_valid[0, :] = False
    out = complete_depth(DepthMap(np.where(checker, st_vals, 0), checker), DepthMap(ts_vals, ts_valid))
    expect = np.where(checker, FROM_STEREO, np.where(ts_valid, FROM_TSDF, FROM_NONE))
    np.testing.assert_array_equal(out.provenance, expect)
    np.testing.assert_array_equal(out.depth.values[checker], st_vals[checker])
    fill = ~checker & ts_valid
    np.testing.assert_array_equal(out.depth.values[fill], ts_vals[fill])
    assert not out.depth.valid[~checker & ~ts_valid].any()


def test_completion_resolution_mismatch():
    with pytest.raises(InvalidInputError):
        complete_depth(DepthMap(np.ones((2, 2)), np.ones((2, 2), bool)), DepthMap(np.ones((3, 2)), np.ones((3, 2), bool)))


def test_save_load_roundtrip(tmp_path):
    vol = _plane_volume().integrate(_plane_depth(), PoseSE3.identity(), K)
    vol.save(tmp_path / "v.tsdf")
    back = TSDFVolume.load(tmp_path / "v.tsdf")
    assert back.dims == vol.dims and back.mu == vol.mu
    np.testing.assert_array_equal(back.sdf, vol.sdf)
    np.testing.assert_array_equal(back.weight, vol.weight)
    (tmp_path / "bad.tsdf").write_bytes(b"TSDF1\n\x00")
    with pytest.raises(InvalidInputError):
        TSDFVolume.load(tmp_path / "bad.tsdf")


def test_fuse_and_bounds():
    lo, hi = depth_bounds([_plane_depth()], [PoseSE3.identity()], K, margin=0.0, stride=1)
    assert lo[2] == pytest.approx(2.0) and hi[2] == pytest.approx(2.0)
    assert hi[0] == pytest.approx(2.0 * (79 - K.cx) / K.fx)
    vol = fuse_depths([_plane_depth()] * 2, [PoseSE3.identity()] * 2, K, [-0.4, -0.3, 1.5], [0.4, 0.3, 2.5], VOX)
    assert vol.weight.max() == 2
