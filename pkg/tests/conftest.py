import numpy as np
import pytest

from mvcg.geometry import CameraIntrinsics, PoseSE3, se3_exp
from mvcg.harness import ArtifactSpec, default_intrinsics, make_dataset, plane_scene, tabletop_scene

# acceptance lines collected during the run and echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def K100():
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


@pytest.fixture(scope="session")
def K_small():
    return default_intrinsics()


def random_pose(rng, rot=0.5, trans=1.0) -> PoseSE3:
    twist = np.concatenate([rng.uniform(-trans, trans, 3), rng.uniform(-rot, rot, 3)])
    return se3_exp(twist)


@pytest.fixture(scope="session")
def tabletop():
    return tabletop_scene(n_views=16)


@pytest.fixture(scope="session")
def tabletop_clean(tabletop):
    return make_dataset(tabletop, ArtifactSpec(), seed=0)


@pytest.fixture(scope="session")
def plane3():
    return make_dataset(plane_scene(n_views=3), ArtifactSpec(), seed=0)


@pytest.fixture(scope="session")
def tabletop8():
    """Eight clean tabletop views: (scene, images, gt depths)."""
    from mvcg.harness import render_gt

    scene = tabletop_scene(n_views=8)
    images, depths = [], []
    for v in range(8):
        img, d = render_gt(scene, v)
        images.append(img)
        depths.append(d)
    return scene, images, depths


@pytest.fixture(scope="session")
def fitted_tabletop(tabletop8):
    """A field fitted to the eight tabletop views at the GT poses."""
    from mvcg.field import FitSchedule, RenderConfig, fit_field
    from mvcg.tsdf import depth_bounds

    scene, images, depths = tabletop8
    lo, hi = depth_bounds(depths, scene.poses, scene.K, margin=0.05)
    cfg = RenderConfig(64, 0.3, 2.0)
    fld, hist = fit_field(images, scene.poses, scene.K, lo, hi, cfg, FitSchedule(resolution=32, iterations=300))
    return fld, hist, cfg
