"""File-based end-to-end driver.

Stage order: synth (dataset) -> vote -> refine (BA + supervision loop) ->
fit_field -> global_ba -> fuse -> complete -> refit_field -> final_fuse -> eval.
Every stage reads its inputs from disk and writes its outputs to disk, so any
stage can be rerun alone. Timings live only in ``manifest.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import io
from .field import DenseGridField, FitSchedule, RenderConfig, downsample_observation, fit_field, render_view_downsampled, render_view_guided
from .geometry import CameraIntrinsics, DepthMap, InvalidInputError, bilinear_sample_array, pixel_grid
from .harness import (
    ArtifactSpec,
    SceneSpec,
    floater_count_for_fraction,
    inject_artifacts,
    perturb_poses,
    plane_scene,
    render_gt,
    scene_mesh,
    sphere_scene,
    tabletop_scene,
    to_gray,
)
from .metrics import Trajectory, TriangleMesh, ate, depth_errors, mesh_errors, psnr, report_dict, rpe, umeyama
from .refinement import RefinementSchedule, run_refinement, vote_all
from .robust_ba import BAConfig, RobustLossConfig, all_pairs, make_window, solve_global_ba, solve_local_ba
from .sampling import default_sigma
from .tsdf import TSDFVolume, complete_depth, depth_bounds, extract_mesh, fuse_depths, render_depth
from .voting import VotingThresholds

logger = logging.getLogger(__name__)


class ConfigError(InvalidInputError):
    """The configuration is malformed or out of range."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: str):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class DependencyError(StageError):
    def __init__(self, stage: str, missing: Path):
        super().__init__(stage, f"missing upstream output {missing}")
        self.missing = Path(missing)


# --- configuration ----------------------------------------------------------------


@dataclass
class StageFlags:
    vote: bool = True
    refine: bool = True
    fit_field: bool = True
    global_ba: bool = True
    fuse: bool = True
    complete: bool = True
    refit_field: bool = True
    final_fuse: bool = True
    eval: bool = True


@dataclass
class SynthConfig:
    scene: str = "tabletop"
    n_views: int = 16
    variant: int = 0
    rot_std_deg: float = 1.0
    trans_std_frac: float = 0.01
    floater_fraction: float = 0.02

    def __post_init__(self):
        if self.scene not in ("tabletop", "sphere", "plane"):
            raise ConfigError(f"unknown scene {self.scene!r}")
        if self.n_views < 3:
            raise ConfigError("need at least 3 views")
        if min(self.rot_std_deg, self.trans_std_frac, self.floater_fraction) < 0:
            raise ConfigError("synth magnitudes must be non-negative")


@dataclass
class WindowConfig:
    size: int = 0  # 0: one window over all frames
    max_gap: int = 1
    stride: int = 4
    vote_neighbors: int = 8

    def __post_init__(self):
        if self.size < 0 or self.max_gap < 1 or self.stride < 1 or self.vote_neighbors < 1:
            raise ConfigError("window options out of range")


@dataclass
class GuidedConfig:
    samples: int = 16
    iterations: int = 150

    def __post_init__(self):
        if self.samples < 2 or self.iterations < 0:
            raise ConfigError("guided refit options out of range")


@dataclass
class TSDFConfig:
    voxel_size: float = 0.01
    mu_voxels: float = 4.0
    weight_cap: float = 64.0
    margin: float = 0.05

    def __post_init__(self):
        if self.voxel_size <= 0 or self.mu_voxels < 2 or self.weight_cap <= 0 or self.margin < 0:
            raise ConfigError("tsdf options out of range")


def _default_artifacts() -> ArtifactSpec:
    return ArtifactSpec(floater_radius_px=4.0, hole_fraction=0.02)


@dataclass
class PipelineConfig:
    dataset_dir: str = "dataset"
    output_dir: str = "run"
    seed: int = 0
    stages: StageFlags = field(default_factory=StageFlags)
    synth: SynthConfig = field(default_factory=SynthConfig)
    artifacts: ArtifactSpec = field(default_factory=_default_artifacts)
    voting: VotingThresholds = field(default_factory=VotingThresholds)
    window: WindowConfig = field(default_factory=WindowConfig)
    ba: BAConfig = field(default_factory=BAConfig)
    refinement: RefinementSchedule = field(default_factory=RefinementSchedule)
    render: RenderConfig = field(default_factory=lambda: RenderConfig(n_samples=64, near=0.3, far=2.0))
    fit: FitSchedule = field(default_factory=lambda: FitSchedule(resolution=32, iterations=300))
    guided: GuidedConfig = field(default_factory=GuidedConfig)
    tsdf: TSDFConfig = field(default_factory=TSDFConfig)

    @property
    def dataset(self) -> Path:
        return Path(self.dataset_dir)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if getattr(obj, f.name) is not None}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _to_plain(cfg)


def config_to_toml(cfg: PipelineConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kw = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kw[name] = _build(tp, value, f"{where}.{name}" if where else name)
        elif tp is tuple or typing.get_origin(tp) is tuple:
            kw[name] = tuple(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where or 'root'}]: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def load_config(path) -> PipelineConfig:
    try:
        data = tomli.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


# --- dataset layout -------------------------------------------------------------------


def _name(k: int) -> str:
    return f"{k:03d}"


def make_scene(cfg: SynthConfig) -> SceneSpec:
    if cfg.scene == "tabletop":
        return tabletop_scene(n_views=cfg.n_views, variant=cfg.variant)
    if cfg.scene == "sphere":
        return sphere_scene(n_views=cfg.n_views)
    return plane_scene(n_views=cfg.n_views)


def stage_synth(cfg: PipelineConfig) -> dict:
    """Render the harness scene and write the dataset directory."""
    ds = cfg.dataset
    for sub in ("images", "depth", "gt_depth", "masks"):
        (ds / sub).mkdir(parents=True, exist_ok=True)
    scene = make_scene(cfg.synth)
    art = cfg.artifacts
    if cfg.synth.floater_fraction > 0:
        n = floater_count_for_fraction((scene.K.height, scene.K.width), cfg.synth.floater_fraction, art.floater_radius_px)
        art = dataclasses.replace(art, floater_count=n)
    for v in range(scene.n_views):
        img, d = render_gt(scene, v)
        cd, m = inject_artifacts(d, art, seed=cfg.seed * 1000 + v)
        io.write_image(ds / "images" / f"{_name(v)}.png", img)
        io.write_depth_pfm(ds / "depth" / f"{_name(v)}.pfm", cd)
        io.write_depth_pfm(ds / "gt_depth" / f"{_name(v)}.pfm", d)
        io.write_mask(ds / "masks" / f"{_name(v)}.png", m.combined)
    init, _ = perturb_poses(scene.poses, cfg.synth.rot_std_deg, cfg.synth.trans_std_frac, scene.scale, seed=cfg.seed + 7)
    ids = list(range(scene.n_views))
    io.write_tum(ds / "poses_gt.tum", Trajectory(ids, scene.poses))
    io.write_tum(ds / "poses_init.tum", Trajectory(ids, init))
    spec = {"scene": scene.to_dict(), "artifacts": dataclasses.asdict(art), "seed": cfg.seed}
    (ds / "scene.toml").write_text(tomli_w.dumps(_to_plain(spec)))
    return {"views": scene.n_views}


class _Inputs:
    """Reads upstream files on behalf of one stage and records what was read."""

    def __init__(self, stage: str, cfg: PipelineConfig):
        self.stage = stage
        self.cfg = cfg
        self.read: list[Path] = []

    def need(self, path: Path) -> Path:
        if not Path(path).exists():
            raise DependencyError(self.stage, path)
        self.read.append(Path(path))
        return Path(path)

    def scene(self) -> SceneSpec:
        data = tomli.loads(self.need(self.cfg.dataset / "scene.toml").read_text())
        return SceneSpec.from_dict(data["scene"])

    def K(self) -> CameraIntrinsics:
        return self.scene().K

    def n_views(self) -> int:
        return len(self.traj(self.cfg.dataset / "poses_gt.tum").poses)

    def traj(self, path) -> Trajectory:
        return io.read_tum(self.need(path))

    def images(self, n):
        return [io.read_image(self.need(self.cfg.dataset / "images" / f"{_name(k)}.png")) for k in range(n)]

    def depths(self, folder: Path, n):
        return [io.read_depth_pfm(self.need(folder / f"{_name(k)}.pfm"), k) for k in range(n)]

    def pfms(self, folder: Path, n, suffix=""):
        return [io.read_pfm(self.need(folder / f"{_name(k)}{suffix}.pfm")) for k in range(n)]


def _latest_poses(inp: _Inputs) -> Path:
    out = inp.cfg.out
    for p in (out / "global_ba" / "poses.tum", out / "refine" / "poses.tum"):
        if p.exists():
            return p
    return inp.cfg.dataset / "poses_init.tum"


def stage_vote(cfg: PipelineConfig, inp: _Inputs) -> dict:
    n = inp.n_views()
    K = inp.K()
    poses = inp.traj(cfg.dataset / "poses_init.tum").poses
    depths = inp.depths(cfg.dataset / "depth", n)
    votes = vote_all(depths, poses, K, cfg.voting, cfg.window.vote_neighbors)
    d = cfg.out / "vote"
    d.mkdir(parents=True, exist_ok=True)
    for k, vm in enumerate(votes):
        io.write_pfm(d / f"{_name(k)}_conf.pfm", vm.confidence)
        io.write_mask(d / f"{_name(k)}_mask.png", vm.mask)
        io.write_depth_pfm(d / f"{_name(k)}_filtered.pfm", vm.filtered)
    summary = {"pass_fraction": [vm.pass_fraction for vm in votes], "mean_pass_fraction": float(np.mean([vm.pass_fraction for vm in votes]))}
    io.write_json(d / "summary.json", summary)
    return summary


def stage_ba(cfg: PipelineConfig, inp: _Inputs) -> dict:
    """One local BA over all frames with the stage-``vote`` confidences."""
    n = inp.n_views()
    K = inp.K()
    poses = inp.traj(cfg.dataset / "poses_init.tum").poses
    depths = inp.depths(cfg.dataset / "depth", n)
    confs = inp.pfms(cfg.out / "vote", n, "_conf")
    gray = [to_gray(im) for im in inp.images(n)]
    win = make_window(gray, poses, depths, confs, K, cfg.window.stride, edges=all_pairs(n, cfg.window.max_gap))
    res = solve_local_ba(win, cfg.ba, cfg.voting)
    d = cfg.out / "ba"
    d.mkdir(parents=True, exist_ok=True)
    io.write_tum(d / "poses.tum", Trajectory(list(range(n)), res.window.poses()))
    write_energy_csv(d / "energy.csv", res.history)
    return {"iterations": res.iterations, "converged": res.converged}


def write_energy_csv(path, history) -> None:
    lines = ["iteration,e_photo,e_depth,e_nerf,l_vote,e_total"]
    for k, e in enumerate(history):
        lines.append(f"{k},{e.e_photo:.17g},{e.e_depth:.17g},{e.e_nerf:.17g},{e.l_vote:.17g},{e.e_total:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def stage_refine(cfg: PipelineConfig, inp: _Inputs) -> dict:
    n = inp.n_views()
    K = inp.K()
    poses = inp.traj(cfg.dataset / "poses_init.tum").poses
    depths = inp.depths(cfg.dataset / "depth", n)
    gray = [to_gray(im) for im in inp.images(n)]
    size = cfg.window.size or None
    res = run_refinement(
        gray, poses, depths, K, cfg.refinement, cfg.ba, cfg.voting,
        regenerator=None, window_size=size, stride=cfg.window.stride,
        max_gap=cfg.window.max_gap, k_neighbors=cfg.window.vote_neighbors,
    )
    d = cfg.out / "refine"
    (d / "dobs").mkdir(parents=True, exist_ok=True)
    io.write_tum(d / "poses.tum", Trajectory(list(range(n)), res.poses))
    for k, (dm, vm) in enumerate(zip(res.d_obs, res.state.votes)):
        io.write_depth_pfm(d / "dobs" / f"{_name(k)}.pfm", dm)
        io.write_pfm(d / "dobs" / f"{_name(k)}_conf.pfm", vm.confidence)
    thr = res.state.thresholds
    report = {
        "iterations": [r.as_dict() for r in res.reports],
        "final_thresholds": dataclasses.asdict(thr),
        "converged_early": res.converged_early,
    }
    io.write_json(d / "report.json", report)
    return {"outer_iterations": len(res.reports) - 1}


def _bounds_from(depths, poses, K, margin):
    return depth_bounds(depths, poses, K, margin=margin)


def stage_fit_field(cfg: PipelineConfig, inp: _Inputs) -> dict:
    n = inp.n_views()
    K = inp.K()
    poses = inp.traj(cfg.out / "refine" / "poses.tum").poses
    images = inp.images(n)
    dobs = inp.depths(cfg.out / "refine" / "dobs", n)
    confs = inp.pfms(cfg.out / "refine" / "dobs", n, "_conf")
    trusted = [d.masked(c > 0) for d, c in zip(dobs, confs)]
    lo, hi = _bounds_from(trusted, poses, K, cfg.tsdf.margin)
    sched = dataclasses.replace(cfg.fit, seed=cfg.seed)
    fld, hist = fit_field(images, poses, K, lo, hi, cfg.render, sched)
    d = cfg.out / "field"
    d.mkdir(parents=True, exist_ok=True)
    fld.save(d / "initial.dgf")
    io.write_json(d / "initial_history.json", {"loss": hist.loss, "psnr": hist.psnr, "levels": hist.levels})
    return {"final_psnr": hist.psnr[-1]}


def _final_thresholds(inp: _Inputs) -> VotingThresholds:
    rep = io.read_json(inp.need(inp.cfg.out / "refine" / "report.json"))
    return VotingThresholds(**rep["final_thresholds"])


def stage_global_ba(cfg: PipelineConfig, inp: _Inputs) -> dict:
    n = inp.n_views()
    K = inp.K()
    poses = inp.traj(cfg.out / "refine" / "poses.tum").poses
    images = inp.images(n)
    dobs = inp.depths(cfg.out / "refine" / "dobs", n)
    confs = inp.pfms(cfg.out / "refine" / "dobs", n, "_conf")
    fld = DenseGridField.load(inp.need(cfg.out / "field" / "initial.dgf"))
    thr = _final_thresholds(inp)
    gray = [to_gray(im) for im in images]
    win = make_window(gray, poses, dobs, confs, K, cfg.window.stride, edges=all_pairs(n, cfg.window.max_gap))
    res = solve_global_ba(win, fld, images, cfg.ba, thr, cfg.render)
    d = cfg.out / "global_ba"
    d.mkdir(parents=True, exist_ok=True)
    io.write_tum(d / "poses.tum", Trajectory(list(range(n)), res.window.poses()))
    write_energy_csv(d / "energy.csv", res.history)
    return {"iterations": res.iterations}


def stage_fuse(cfg: PipelineConfig, inp: _Inputs) -> dict:
    """Re-vote the refined depths at the final poses and fuse the survivors."""
    n = inp.n_views()
    K = inp.K()
    poses = inp.traj(_latest_poses(inp)).poses
    dobs = inp.depths(cfg.out / "refine" / "dobs", n)
    votes = vote_all(dobs, poses, K, cfg.voting, cfg.window.vote_neighbors)
    stereo = [vm.filtered for vm in votes]
    lo, hi = _bounds_from(stereo, poses, K, cfg.tsdf.margin)
    vol = fuse_depths(stereo, poses, K, lo, hi, cfg.tsdf.voxel_size, cfg.tsdf.mu_voxels * cfg.tsdf.voxel_size)
    vol.weight_cap = cfg.tsdf.weight_cap
    d = cfg.out / "fuse"
    (d / "stereo").mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(stereo):
        io.write_depth_pfm(d / "stereo" / f"{_name(k)}.pfm", s)
    vol.save(d / "volume.tsdf")
    mesh = extract_mesh(vol)
    io.write_ply(d / "mesh.ply", mesh)
    return {"triangles": len(mesh.triangles), "dims": list(vol.dims)}


def stage_complete(cfg: PipelineConfig, inp: _Inputs) -> dict:
    n = inp.n_views()
    K = inp.K()
    poses = inp.traj(_latest_poses(inp)).poses
    stereo = inp.depths(cfg.out / "fuse" / "stereo", n)
    vol = TSDFVolume.load(inp.need(cfg.out / "fuse" / "volume.tsdf"))
    d = cfg.out / "complete"
    d.mkdir(parents=True, exist_ok=True)
    filled = 0
    for k in range(n):
        rendered = render_depth(vol, poses[k], K)
        io.write_depth_pfm(d / f"{_name(k)}_tsdf.pfm", rendered)
        cd = complete_depth(stereo[k], rendered)
        io.write_depth_pfm(d / f"{_name(k)}.pfm", cd.depth)
        io.write_image(d / f"{_name(k)}_src.png", cd.provenance.astype(np.float64) / 255.0)
        filled += int((cd.provenance == 2).sum())
    return {"filled_pixels": filled}


def reduced_depth(depth: DepthMap, K: CameraIntrinsics, factor: int) -> np.ndarray:
    """Bilinear lookup of a full-res depth map at the reduced-scale pixel centers (NaN where invalid)."""
    Kd = K.box_downsampled(factor)
    v, u = np.mgrid[0 : Kd.height, 0 : Kd.width].astype(np.float64)
    off = (factor - 1) / 2.0
    vals, ok = bilinear_sample_array(depth.values, depth.valid, factor * u + off, factor * v + off)
    return np.where(ok, vals, np.nan)


def depth_noise_rms(stereo, rendered) -> float:
    """Robust RMS of stereo vs TSDF depth disagreement (1.4826 MAD)."""
    r = np.concatenate([(s.values - t.values)[s.valid & t.valid] for s, t in zip(stereo, rendered)])
    if r.size == 0:
        return 0.0
    return float(1.4826 * np.median(np.abs(r - np.median(r))))


def stage_refit_field(cfg: PipelineConfig, inp: _Inputs) -> dict:
    n = inp.n_views()
    K = inp.K()
    poses = inp.traj(_latest_poses(inp)).poses
    images = inp.images(n)
    completed = inp.depths(cfg.out / "complete", n)
    stereo = inp.depths(cfg.out / "fuse" / "stereo", n)
    rendered = [io.read_depth_pfm(inp.need(cfg.out / "complete" / f"{_name(k)}_tsdf.pfm"), k) for k in range(n)]
    init = DenseGridField.load(inp.need(cfg.out / "field" / "initial.dgf"))
    sigma = default_sigma(depth_noise_rms(stereo, rendered), cfg.tsdf.voxel_size)
    guide = [reduced_depth(c, K, cfg.render.downsample) for c in completed]
    sched = dataclasses.replace(
        cfg.fit, resolution=init.resolution, iterations=cfg.guided.iterations,
        coarse_to_fine=False, n_samples=cfg.guided.samples, seed=cfg.seed,
    )
    fld, hist = fit_field(images, poses, K, init.lo, init.hi, cfg.render, sched, guide=guide, sigma_d=sigma, init=init)
    d = cfg.out / "field"
    d.mkdir(parents=True, exist_ok=True)
    fld.save(d / "final.dgf")
    io.write_json(d / "final_history.json", {"loss": hist.loss, "psnr": hist.psnr, "sigma_d": sigma})
    return {"sigma_d": sigma, "final_psnr": hist.psnr[-1] if hist.psnr else None}


def stage_final_fuse(cfg: PipelineConfig, inp: _Inputs) -> dict:
    n = inp.n_views()
    K = inp.K()
    poses = inp.traj(_latest_poses(inp)).poses
    completed = inp.depths(cfg.out / "complete", n)
    lo, hi = _bounds_from(completed, poses, K, cfg.tsdf.margin)
    vol = fuse_depths(completed, poses, K, lo, hi, cfg.tsdf.voxel_size, cfg.tsdf.mu_voxels * cfg.tsdf.voxel_size)
    d = cfg.out / "final"
    d.mkdir(parents=True, exist_ok=True)
    vol.save(d / "volume.tsdf")
    mesh = extract_mesh(vol)
    io.write_ply(d / "mesh.ply", mesh)
    return {"triangles": len(mesh.triangles)}


def align_mesh(mesh: TriangleMesh, est_poses, gt_poses) -> TriangleMesh:
    """Map a mesh from the estimated frame into the ground-truth frame via trajectory alignment."""
    src = np.array([p.center for p in est_poses])
    dst = np.array([p.center for p in gt_poses])
    _, R, t = umeyama(src, dst, with_scale=False)
    return TriangleMesh(mesh.vertices @ R.T + t, mesh.triangles)


def evaluate(cfg: PipelineConfig, inp: _Inputs, poses, depths, mesh=None, fld=None, guide=None, sigma_d=None) -> dict:
    """Metrics of one trajectory / depth set / mesh / field against ground truth.

    With ``guide`` (reduced-scale z-depth per view) the field is rendered
    with depth-guided samples, matching how a guided refit was trained.
    """
    n = inp.n_views()
    K = inp.K()
    gt = inp.traj(cfg.dataset / "poses_gt.tum")
    est = Trajectory(list(range(n)), poses)
    a = ate(est, gt)
    rte, rre = rpe(est, gt)
    gtd = inp.depths(cfg.dataset / "gt_depth", n)
    num = den = ok = 0.0
    for p, g in zip(depths, gtd):
        st = depth_errors(p, g, align=None)
        num += st.absrel * st.count
        ok += st.delta_fraction * st.count
        den += st.count
    acc = rec = f1 = ch = None
    if mesh is not None and not mesh.empty:
        gt_mesh = scene_mesh(inp.scene())
        me = mesh_errors(align_mesh(mesh, poses, gt.poses), gt_mesh, seed=cfg.seed)
        acc, rec, f1, ch = me.accuracy, me.recall, me.f1, me.chamfer_mm
    p_db = None
    if fld is not None:
        images = inp.images(n)
        vals = []
        for k, (pose, img) in enumerate(zip(poses, images)):
            if guide is None:
                rgb = render_view_downsampled(fld, pose, K, cfg.render)[0]
            else:
                g = np.nan_to_num(guide[k], nan=0.0)
                rgb = render_view_guided(fld, pose, K, g, sigma_d, cfg.render, cfg.guided.samples, cfg.seed)[0]
            vals.append(psnr(rgb, downsample_observation(img, cfg.render.downsample)))
        p_db = float(np.mean(vals))
    return report_dict(a, rte, rre, num / den, ok / den, acc, rec, f1, ch, p_db)


def stage_eval(cfg: PipelineConfig, inp: _Inputs) -> dict:
    n = inp.n_views()
    out = cfg.out
    init_poses = inp.traj(cfg.dataset / "poses_init.tum").poses
    init_depths = inp.depths(cfg.dataset / "depth", n)
    initial = evaluate(cfg, inp, init_poses, init_depths)

    poses = inp.traj(_latest_poses(inp)).poses
    depth_dir = out / "complete" if (out / "complete" / f"{_name(0)}.pfm").exists() else cfg.dataset / "depth"
    depths = inp.depths(depth_dir, n)
    mesh_path = next((p for p in (out / "final" / "mesh.ply", out / "fuse" / "mesh.ply") if p.exists()), None)
    mesh = io.read_ply(inp.need(mesh_path)) if mesh_path else None
    field_path = next((p for p in (out / "field" / "final.dgf", out / "field" / "initial.dgf") if p.exists()), None)
    fld = DenseGridField.load(inp.need(field_path)) if field_path else None
    guide = sigma_d = None
    if field_path is not None and field_path.name == "final.dgf":
        sigma_d = io.read_json(inp.need(out / "field" / "final_history.json"))["sigma_d"]
        guide = [reduced_depth(d, inp.K(), cfg.render.downsample) for d in depths]
    final = evaluate(cfg, inp, poses, depths, mesh, fld, guide, sigma_d)
    io.write_json(out / "metrics.json", final)
    curves = None
    if (out / "refine" / "report.json").exists():
        curves = io.read_json(inp.need(out / "refine" / "report.json"))["iterations"]
    io.write_json(out / "report.json", {"initial": initial, "final": final, "refinement": curves})
    return final


STAGES = [
    ("vote", stage_vote),
    ("refine", stage_refine),
    ("fit_field", stage_fit_field),
    ("global_ba", stage_global_ba),
    ("fuse", stage_fuse),
    ("complete", stage_complete),
    ("refit_field", stage_refit_field),
    ("final_fuse", stage_final_fuse),
    ("eval", stage_eval),
]
STAGE_FUNCS = dict(STAGES) | {"ba": stage_ba}


# --- running ----------------------------------------------------------------------------


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _snapshot(root: Path) -> dict:
    if not root.exists():
        return {}
    return {p: p.stat().st_mtime_ns for p in sorted(root.rglob("*")) if p.is_file()}


def run_stage(cfg: PipelineConfig, name: str) -> dict:
    """Run one stage and return its manifest entry."""
    if name not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {name!r}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    before = _snapshot(cfg.out)
    inp = _Inputs(name, cfg)
    t0 = time.perf_counter()
    try:
        info = STAGE_FUNCS[name](cfg, inp)
    except StageError:
        raise
    except InvalidInputError as exc:
        raise StageError(name, str(exc)) from exc
    except Exception as exc:  # any other failure halts the run with the stage named
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    wall = time.perf_counter() - t0
    after = _snapshot(cfg.out)
    outputs = [p for p, m in after.items() if before.get(p) != m and p.name != "manifest.json"]
    seen = set()
    inputs = [p for p in inp.read if not (p in seen or seen.add(p))]
    logger.info("stage %s done in %.1f s", name, wall)
    return {
        "stage": name,
        "inputs": [{"path": str(p), "sha256": sha256(p)} for p in inputs],
        "outputs": [{"path": str(p), "sha256": sha256(p)} for p in outputs],
        "wall_time_s": wall,
        "info": info,
    }


@dataclass
class RunReport:
    stages: list = field(default_factory=list)
    metrics: dict | None = None
    manifest_path: Path | None = None
    curves: list | None = None


def write_manifest(cfg: PipelineConfig, entries: list) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "manifest.json"
    config_hash = hashlib.sha256(config_to_toml(cfg).encode()).hexdigest()
    io.write_json(path, {"config_sha256": config_hash, "stages": entries})
    return path


def run_pipeline(cfg: PipelineConfig, synth: bool = False) -> RunReport:
    """Run the enabled stages in order; ``synth`` first writes the dataset.

    A failing stage raises :class:`StageError`; the manifest still lists the
    stages that completed before it.
    """
    entries = []
    try:
        if synth:
            t0 = time.perf_counter()
            info = stage_synth(cfg)
            entries.append({"stage": "synth", "inputs": [], "outputs": [], "wall_time_s": time.perf_counter() - t0, "info": info})
        for name, _ in STAGES:
            if getattr(cfg.stages, name):
                entries.append(run_stage(cfg, name))
    finally:
        path = write_manifest(cfg, entries)
    metrics = None
    if (cfg.out / "metrics.json").exists() and cfg.stages.eval:
        metrics = io.read_json(cfg.out / "metrics.json")
    curves = None
    if cfg.stages.refine and (cfg.out / "refine" / "report.json").exists():
        curves = io.read_json(cfg.out / "refine" / "report.json")["iterations"]
    return RunReport(entries, metrics, path, curves)


def emit_report(run: RunReport) -> tuple[str, dict]:
    """Human-readable text and a machine-readable dict with deterministic key order."""
    data = {
        "stages": [e["stage"] for e in run.stages],
        "metrics": run.metrics or report_dict(),
        "curves": run.curves or [],
    }
    lines = [f"stages run: {len(run.stages)}"]
    for e in run.stages:
        lines.append(f"  {e['stage']:<12} {e['wall_time_s']:8.2f} s")
    if run.metrics:
        for k, v in run.metrics.items():
            lines.append(f"  {k:<10} {'n/a' if v is None else f'{v:.6g}'}")
    return "\n".join(lines), json.loads(json.dumps(data, sort_keys=True))
