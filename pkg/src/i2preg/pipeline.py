"""End-to-end registration: enhance, filter, select, densify, solve and score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import channel_enhance as ce
from .bundle import FeatureBundle, load_bundle, read_tensors
from .config import PipelineConfig
from .cross_filter import CmcfResult, cmcf_apply
from .errors import DomainError, PoseEstimationError, RegistrationError, ShapeError
from .features import FeatureGrid, PointFeatureSet, add_positional, random_projection
from .geometry import CameraIntrinsics, RigidTransform
from .matching import (
    CoarseMatches,
    FineMatches,
    PatchGeometry,
    TransportPlan,
    cosine_score_map,
    extract_coarse,
    many_to_one_count,
    refine_fine,
    sinkhorn,
)
from .metrics import MetricThresholds, PairEvaluation, inlier_stats, patch_inlier_ratio
from .pose import RansacConfig, RansacResult, pnp_ransac, pose_rmse

STAGES = ("input", "enhance", "filter", "match", "refine", "pose", "eval")


class StageError(RegistrationError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RegistrationInputs:
    coarse_grid: FeatureGrid
    coarse_points: PointFeatureSet
    fine_grid: FeatureGrid
    fine_points: PointFeatureSet
    geometry: PatchGeometry
    intrinsics: CameraIntrinsics
    depth: np.ndarray | None = None
    truth: RigidTransform | None = None
    name: str = "scene"


def inputs_from_scene(scene, name: str | None = None) -> RegistrationInputs:
    return RegistrationInputs(scene.coarse_grid, scene.coarse_points, scene.fine_grid, scene.fine_points,
                              scene.geometry, scene.intrinsics, scene.depth, scene.truth,
                              name or f"seed{scene.seed}")


def inputs_from_bundle(bundle: FeatureBundle, name: str = "bundle") -> RegistrationInputs:
    try:
        grids, pts, arrays = bundle.grids, bundle.points, bundle.arrays
        cell = int(bundle.meta["cell_size"])
        gshape = tuple(int(v) for v in bundle.meta["grid_shape"])
        geometry = PatchGeometry(cell, gshape, arrays["point_patch"].astype(np.int64))
        inp = RegistrationInputs(grids["coarse"], pts["coarse"], grids["fine"], pts["fine"], geometry,
                                 bundle.intrinsics, arrays.get("depth"), bundle.pose, name)
    except KeyError as exc:
        raise ShapeError(f"bundle lacks a required entry: {exc}") from None
    if (inp.coarse_grid.height, inp.coarse_grid.width) != gshape:
        raise ShapeError("coarse grid shape disagrees with the recorded cell grid")
    if len(geometry.point_patch) != inp.fine_points.count:
        raise ShapeError("point-patch assignment does not cover the fine points")
    return inp


def load_inputs(path) -> RegistrationInputs:
    return inputs_from_bundle(load_bundle(path), name=str(path))


@dataclass(frozen=True)
class EnhanceParams:
    ice: ce.IceParams
    pce: ce.PceParams
    fusion: ce.FusionParams


def enhance_params(cfg: PipelineConfig, channels: int) -> EnhanceParams:
    fusion = ce.FusionParams(cfg.alpha, cfg.beta, cfg.lam, cfg.mu)
    if cfg.params_file:
        t, _ = read_tensors(cfg.params_file)
        try:
            ice = ce.IceParams(t["ice/kernels"], t["ice/norm_scale"], t["ice/norm_shift"])
            pce = ce.PceParams(t["pce/w_q"], t["pce/w_k"], t["pce/w_v"],
                               float(t["pce/scale"][0]) if "pce/scale" in t else None)
        except KeyError as exc:
            raise ShapeError(f"parameter file lacks {exc}") from None
        return EnhanceParams(ice, pce, fusion)
    ice = ce.IceParams.random(cfg.seed, k=cfg.ice_kernel, std=cfg.ice_std)
    pce = ce.PceParams.random(channels, cfg.seed + 1)
    return EnhanceParams(ice, pce, fusion)


def enhance(grid: FeatureGrid, points: PointFeatureSet, cfg: PipelineConfig,
            params: EnhanceParams | None = None) -> tuple[FeatureGrid, PointFeatureSet]:
    """Optional positional embedding, then ICE / PCE with residual fusion."""
    C = grid.channels
    if cfg.positional_L > 0:
        L = cfg.positional_L
        grid = add_positional(grid, random_projection(2 * (2 * L + 1), C, cfg.seed + 2), L)
        points = add_positional(points, random_projection(3 * (2 * L + 1), C, cfg.seed + 3), L)
    p = params or enhance_params(cfg, C)
    chw = grid.to_chw()
    img = ce.residual_fuse(chw, ce.ice_forward(chw, p.ice), p.fusion, "image")
    pts = ce.residual_fuse(points.descriptors, ce.pce_forward(points.descriptors, p.pce), p.fusion, "points")
    return FeatureGrid.from_chw(img, grid.level), points.with_descriptors(pts)


@dataclass
class RegistrationResult:
    name: str
    coarse: CoarseMatches
    fine: FineMatches
    plan: TransportPlan | None
    ransac: RansacResult | None
    evaluation: PairEvaluation | None
    cmcf: CmcfResult | None = None
    many_to_one: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def transform(self) -> RigidTransform | None:
        return self.ransac.transform if self.ransac else None


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (RegistrationError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def match_coarse(grid: FeatureGrid, points: PointFeatureSet, cfg: PipelineConfig):
    score = cosine_score_map(grid.flat(), points.descriptors)
    if cfg.mode == "topk":
        return extract_coarse(None, score, "topk", cfg.k), None, score
    plan = sinkhorn(1.0 - score, cfg.epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol, polish=cfg.sinkhorn_polish)
    return extract_coarse(plan, score, "mutual_argmax"), plan, score


def run_pipeline(inp: RegistrationInputs, cfg: PipelineConfig = PipelineConfig(),
                 evaluate: bool = True) -> RegistrationResult:
    """Run every stage; failures raise StageError naming the stage (pose failures wrap PoseEstimationError)."""
    grid, pts = inp.coarse_grid, inp.coarse_points
    if grid.channels != pts.channels:
        raise StageError("input", ShapeError("image and point features differ in channel count"))
    if cfg.use_ime:
        grid, pts = _stage("enhance", enhance, grid, pts, cfg)
    cm = None
    if cfg.use_cmcf:
        cm = _stage("filter", cmcf_apply, [grid.flat()], [pts.descriptors], cfg.cmcf_iters, cfg.fuse_weight)
        grid = grid.with_values(cm.image[0].reshape(grid.values.shape))
        pts = pts.with_descriptors(cm.points[0])
    coarse, plan, _ = _stage("match", match_coarse, grid, pts, cfg)
    fine = _stage("refine", refine_fine, coarse, inp.fine_grid, inp.fine_points, inp.geometry,
                  cfg.accept_threshold)
    rcfg = RansacConfig(cfg.ransac_iters, cfg.ransac_threshold, cfg.ransac_confidence, cfg.seed)
    uv = fine.pixels[:, ::-1].astype(np.float64)
    xyz = inp.fine_points.positions[fine.point_index]
    ransac = _stage("pose", pnp_ransac, uv, xyz, inp.intrinsics, rcfg)
    result = RegistrationResult(inp.name, coarse, fine, plan, ransac, None, cm, many_to_one_count(coarse))
    if evaluate and inp.truth is not None:
        result.evaluation = _stage("eval", evaluate_result, result, inp, cfg)
    return result


def evaluate_result(result: RegistrationResult, inp: RegistrationInputs, cfg: PipelineConfig) -> PairEvaluation:
    th = MetricThresholds(cfg.tau1, cfg.tau2, cfg.tau3, cfg.pir_radius or None)
    rmse = pose_rmse(result.transform, inp.truth, inp.fine_points.positions)
    ir, missing = 0.0, 0
    if inp.depth is not None and len(result.fine):
        try:
            st = inlier_stats(result.fine.pixels, inp.fine_points.positions[result.fine.point_index],
                              inp.truth, inp.depth, inp.intrinsics, th.tau1)
            ir, missing = st.ratio, st.missing_depth
        except DomainError:
            missing = len(result.fine)
    pir = 0.0
    if inp.depth is not None and len(result.coarse):
        pir = patch_inlier_ratio(result.coarse, inp.truth, inp.geometry, inp.coarse_points.positions,
                                 inp.depth, inp.intrinsics, th.pir_radius)
    return PairEvaluation(ir, rmse, bool(rmse < th.tau3), pir, len(result.fine), len(result.coarse), missing)


__all__ = [
    "STAGES", "StageError", "RegistrationInputs", "RegistrationResult", "EnhanceParams",
    "inputs_from_scene", "inputs_from_bundle", "load_inputs", "enhance", "enhance_params",
    "match_coarse", "run_pipeline", "evaluate_result", "PoseEstimationError",
]
