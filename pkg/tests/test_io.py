import numpy as np
import pytest

from conftest import random_pose
from mvcg import io
from mvcg.geometry import DepthMap, InvalidInputError
from mvcg.metrics import TriangleMesh, Trajectory


def test_pfm_roundtrip(tmp_path, rng):
    for shape in [(7, 5), (4, 6, 3)]:
        a = rng.normal(size=shape).astype(np.float32)
        io.write_pfm(tmp_path / "a.pfm", a)
        np.testing.assert_array_equal(io.read_pfm(tmp_path / "a.pfm"), a)
    with pytest.raises(InvalidInputError):
        io.write_pfm(tmp_path / "b.pfm", np.zeros((2, 2, 2)))


def test_pfm_rejects_garbage(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(io.FormatError):
        io.read_pfm(tmp_path / "x.pfm")
    (tmp_path / "y.pfm").write_bytes(b"Pf\n4 4\n-1.0\n\x00\x00")
    with pytest.raises(io.FormatError):
        io.read_pfm(tmp_path / "y.pfm")


def test_depth_pfm_keeps_invalid_sentinel(tmp_path, rng):
    vals = rng.uniform(1, 3, (6, 8)).astype(np.float32).astype(np.float64)
    valid = rng.uniform(size=vals.shape) > 0.3
    d = DepthMap(np.where(valid, vals, 0.0), valid, 4)
    io.write_depth_pfm(tmp_path / "d.pfm", d)
    back = io.read_depth_pfm(tmp_path / "d.pfm", 4)
    np.testing.assert_array_equal(back.valid, valid)
    np.testing.assert_array_equal(back.values, d.values)


def test_depth_png16_roundtrip(tmp_path, rng):
    vals = np.round(rng.uniform(0.5, 3, (5, 7)), 3)
    valid = rng.uniform(size=vals.shape) > 0.2
    d = DepthMap(np.where(valid, vals, 0.0), valid)
    io.write_depth_png16(tmp_path / "d.png", d)
    back = io.read_depth_png16(tmp_path / "d.png")
    np.testing.assert_array_equal(back.valid, valid)
    np.testing.assert_allclose(back.values, d.values, atol=5e-4)
    (tmp_path / "d.png.json").unlink()
    with pytest.raises(io.FormatError):
        io.read_depth_png16(tmp_path / "d.png")
    with pytest.raises(InvalidInputError):
        io.write_depth_png16(tmp_path / "e.png", DepthMap(np.full((2, 2), 70.0), np.ones((2, 2), bool)))


def test_image_and_mask_roundtrip(tmp_path, rng):
    img = np.round(rng.uniform(size=(5, 6, 3)) * 255) / 255
    io.write_image(tmp_path / "i.png", img)
    np.testing.assert_allclose(io.read_image(tmp_path / "i.png"), img, atol=1e-12)
    m = rng.uniform(size=(5, 6)) > 0.5
    io.write_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(io.read_mask(tmp_path / "m.png"), m)


def test_tum_roundtrip(tmp_path, rng):
    poses = [random_pose(rng, 3.0, 2.0) for _ in range(6)]
    io.write_tum(tmp_path / "t.tum", Trajectory(list(range(6)), poses))
    back = io.read_tum(tmp_path / "t.tum")
    assert back.ids == list(range(6))
    for p, q in zip(back.poses, poses):
        np.testing.assert_allclose(p.matrix(), q.matrix(), atol=1e-12)


@pytest.mark.parametrize(
    "line",
    ["0 1 2 3 0 0 0", "0 1 2 3 0 0 0 2", "0 1 2 3 0 0 0 abc"],
)
def test_tum_rejects_bad_lines(tmp_path, line):
    (tmp_path / "t.tum").write_text("# header\n" + line + "\n")
    with pytest.raises(InvalidInputError):
        io.read_tum(tmp_path / "t.tum")


def test_ply_roundtrip(tmp_path, rng):
    mesh = TriangleMesh(rng.normal(size=(10, 3)).astype(np.float32), rng.integers(0, 10, (7, 3)))
    io.write_ply(tmp_path / "m.ply", mesh)
    back = io.read_ply(tmp_path / "m.ply")
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    io.write_ply(tmp_path / "e.ply", empty)
    assert io.read_ply(tmp_path / "e.ply").empty


def test_ply_rejects_bad_files(tmp_path, rng):
    (tmp_path / "a.ply").write_bytes(b"solid x\n")
    with pytest.raises(io.FormatError):
        io.read_ply(tmp_path / "a.ply")
    (tmp_path / "b.ply").write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    with pytest.raises(io.FormatError):
        io.read_ply(tmp_path / "b.ply")
    mesh = TriangleMesh(rng.normal(size=(4, 3)), [[0, 1, 2]])
    io.write_ply(tmp_path / "c.ply", mesh)
    data = (tmp_path / "c.ply").read_bytes()
    (tmp_path / "c.ply").write_bytes(data[:-5])
    with pytest.raises(io.FormatError):
        io.read_ply(tmp_path / "c.ply")


def test_json_is_deterministic(tmp_path):
    data = {"b": np.float64(1.5), "a": [np.int64(2), np.bool_(True)], "c": float("nan"), "d": np.arange(3)}
    io.write_json(tmp_path / "x.json", data)
    text = (tmp_path / "x.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert io.read_json(tmp_path / "x.json") == {"a": [2, True], "b": 1.5, "c": None, "d": [0, 1, 2]}
