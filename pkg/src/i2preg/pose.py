"""Camera pose from 2D-3D correspondences: DLT + Gauss-Newton PnP inside RANSAC."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    DomainError,
    InsufficientCorrespondencesError,
    PoseEstimationError,
    ShapeError,
)
from .geometry import CameraIntrinsics, RigidTransform, project_to_so3, rotvec_to_matrix, skew

MIN_POINTS = 6


def _check_pairs(pixels, points):
    uv = np.asarray(pixels, dtype=np.float64)
    xyz = np.asarray(points, dtype=np.float64)
    if uv.ndim != 2 or uv.shape[1] != 2 or xyz.ndim != 2 or xyz.shape[1] != 3 or len(uv) != len(xyz):
        raise ShapeError(f"expected (N, 2) pixels and (N, 3) points, got {uv.shape} and {xyz.shape}")
    if not (np.all(np.isfinite(uv)) and np.all(np.isfinite(xyz))):
        raise DomainError("correspondences contain non-finite values")
    return uv, xyz


def dlt_pose(pixels, points, K: CameraIntrinsics, rank_tol: float = 1e-10) -> RigidTransform:
    """Linear pose from >= 6 correspondences via a normalized 3x4 DLT."""
    uv, xyz = _check_pairs(pixels, points)
    n = len(uv)
    if n < MIN_POINTS:
        raise InsufficientCorrespondencesError(f"PnP needs at least {MIN_POINTS} pairs, got {n}")
    xy = K.normalize(uv)
    centre = xyz.mean(axis=0)
    spread = np.sqrt(((xyz - centre) ** 2).sum(axis=1).mean())
    if not spread > 0:
        raise DegenerateConfigurationError("all 3D points coincide")
    scale3 = math.sqrt(3.0) / spread
    Xh = np.hstack([(xyz - centre) * scale3, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xy[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xy[:, 1:] * Xh
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size < 12 or s[-2] <= rank_tol * s[0]:
        raise DegenerateConfigurationError("correspondences do not determine a unique projection")
    P = Vt[-1].reshape(3, 4)
    # Undo the 3D normalization: P X = P' [scale3 (X - c); 1].
    M = P[:, :3] * scale3
    p = P[:, 3] - M @ centre
    if np.linalg.det(M) < 0:
        M, p = -M, -p
    sv = np.linalg.svd(M, compute_uv=False)
    R = project_to_so3(M)
    return RigidTransform(R, p / sv.mean())


def reprojection_errors(transform: RigidTransform, pixels, points, K: CameraIntrinsics):
    """Per-pair pixel error and camera-frame depth."""
    cam = transform.apply(points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = K.project(cam)
        err = np.linalg.norm(proj - np.asarray(pixels, dtype=np.float64), axis=1)
    err = np.where(np.isfinite(err), err, np.inf)
    return err, z


def _residual_jacobian(R, t, xyz, uv, K):
    rx = xyz @ R.T
    Y = rx + t
    z = Y[:, 2]
    res = np.stack([K.fx * Y[:, 0] / z + K.cx - uv[:, 0], K.fy * Y[:, 1] / z + K.cy - uv[:, 1]], axis=1)
    n = len(xyz)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = K.fx / z
    dproj[:, 0, 2] = -K.fx * Y[:, 0] / z**2
    dproj[:, 1, 1] = K.fy / z
    dproj[:, 1, 2] = -K.fy * Y[:, 1] / z**2
    # d(exp(w) R x)/dw at w = 0 is -[R x]_x.
    neg_skew = -np.stack([skew(v) for v in rx])
    J = np.concatenate([dproj @ neg_skew, dproj], axis=2)
    return res.reshape(-1), J.reshape(2 * n, 6)


def refine_pose(initial: RigidTransform, pixels, points, K: CameraIntrinsics,
                iterations: int = 20, grad_tol: float = 1e-10) -> RigidTransform:
    """Gauss-Newton on squared reprojection error, rotation updated as exp(w) R."""
    uv, xyz = _check_pairs(pixels, points)
    R = np.array(initial.rotation)
    t = np.array(initial.translation)
    res, J = _residual_jacobian(R, t, xyz, uv, K)
    cost = res @ res
    for _ in range(iterations):
        grad = J.T @ res
        if not np.all(np.isfinite(grad)) or np.linalg.norm(grad) < grad_tol:
            break
        delta = np.linalg.lstsq(J, -res, rcond=None)[0]
        step, improved = 1.0, False
        for _ in range(30):
            R_new = rotvec_to_matrix(step * delta[:3]) @ R
            t_new = t + step * delta[3:]
            res_new, J_new = _residual_jacobian(R_new, t_new, xyz, uv, K)
            cost_new = res_new @ res_new
            if np.isfinite(cost_new) and cost_new < cost:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        R, t, res, J, cost = project_to_so3(R_new), t_new, res_new, J_new, cost_new
    return RigidTransform(R, t)


def pnp_solve(pixels, points, K: CameraIntrinsics) -> RigidTransform:
    """Least-squares pose: linear initialization then nonlinear refinement."""
    return refine_pose(dlt_pose(pixels, points, K), pixels, points, K)


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 1000
    reprojection_threshold: float = 3.0
    confidence: float = 0.999
    seed: int = 0
    min_sample: int = MIN_POINTS
    refine_rounds: int = 3

    def __post_init__(self) -> None:
        if not self.reprojection_threshold > 0:
            raise DomainError("reprojection threshold must be positive")
        if not 0 < self.confidence < 1:
            raise DomainError("confidence must lie in (0, 1)")
        if self.min_sample < MIN_POINTS:
            raise DomainError(f"the linear solver needs samples of at least {MIN_POINTS}")
        if self.max_iterations < 1:
            raise DomainError("RANSAC needs at least one iteration")


@dataclass(frozen=True)
class RansacResult:
    transform: RigidTransform
    inliers: np.ndarray
    iterations: int
    errors: np.ndarray

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())

    def summary(self) -> dict:
        e = self.errors[self.inliers]
        return {
            "correspondences": int(len(self.inliers)),
            "inliers": self.inlier_count,
            "iterations": self.iterations,
            "reprojection_mean_px": float(e.mean()),
            "reprojection_median_px": float(np.median(e)),
            "reprojection_max_px": float(e.max()),
        }


def _inliers(transform, uv, xyz, K, threshold):
    err, z = reprojection_errors(transform, uv, xyz, K)
    return (err < threshold) & (z > 0), err


def _core(err, mask, threshold):
    """Inliers whose residual is also within 3 robust sigmas (MAD scale) of the consensus.

    Stray pairs that happen to land just inside the pixel threshold would otherwise
    drag the least-squares refinement.
    """
    if not mask.any():
        return mask
    sigma = 1.4826 * float(np.median(err[mask]))
    cut = min(threshold, max(0.01 * threshold, 3.0 * sigma))
    return mask & (err < cut)


def required_iterations(inlier_fraction: float, sample: int, confidence: float) -> float:
    """Draws needed to see one all-inlier sample with the given confidence."""
    good = inlier_fraction**sample
    if good >= 1.0:
        return 0.0
    denom = math.log1p(-good)
    if denom == 0.0:
        return math.inf
    return math.log1p(-confidence) / denom


def pnp_ransac(pixels, points, K: CameraIntrinsics, cfg: RansacConfig = RansacConfig()) -> RansacResult:
    """Robust pose. Sample i is drawn from a generator keyed on (seed, i) so results never depend on scheduling."""
    uv, xyz = _check_pairs(pixels, points)
    n = len(uv)
    s = cfg.min_sample
    if n < s:
        raise InsufficientCorrespondencesError(f"RANSAC needs at least {s} pairs, got {n}")
    best_count, best_pose = 0, None
    it = 0
    while it < cfg.max_iterations:
        rng = np.random.default_rng([cfg.seed, it])
        idx = rng.choice(n, size=s, replace=False)
        it += 1
        try:
            hyp = dlt_pose(uv[idx], xyz[idx], K)
        except (DegenerateConfigurationError, DomainError):
            continue
        mask, _ = _inliers(hyp, uv, xyz, K, cfg.reprojection_threshold)
        count = int(mask.sum())
        if count > best_count:
            best_count, best_pose = count, hyp
        if it >= required_iterations(best_count / n, s, cfg.confidence):
            break
    if best_pose is None or best_count < s:
        raise PoseEstimationError(f"no hypothesis reached {s} inliers after {it} iterations")

    pose = best_pose
    mask, err = _inliers(pose, uv, xyz, K, cfg.reprojection_threshold)
    core = _core(err, mask, cfg.reprojection_threshold)
    for _ in range(cfg.refine_rounds):
        if core.sum() < s:
            break
        try:
            cand = pnp_solve(uv[core], xyz[core], K)
        except (DegenerateConfigurationError, InsufficientCorrespondencesError):
            break
        new_mask, new_err = _inliers(cand, uv, xyz, K, cfg.reprojection_threshold)
        if new_mask.sum() < s:
            break
        new_core = _core(new_err, new_mask, cfg.reprojection_threshold)
        stable = np.array_equal(new_core, core)
        pose, mask, err, core = cand, new_mask, new_err, new_core
        if stable:
            break
    if mask.sum() < s:
        raise PoseEstimationError(f"refined pose keeps only {int(mask.sum())} inliers")
    return RansacResult(pose, mask, it, err)


def pose_rmse(estimated: RigidTransform, truth: RigidTransform, points) -> float:
    """Root mean square distance between the two transforms' images of the points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ShapeError("RMSE needs at least one point")
    d = estimated.apply(p) - truth.apply(p)
    return float(np.sqrt((d**2).sum(axis=1).mean()))


def pose_text(transform: RigidTransform) -> str:
    """12 reals on one line: row-major rotation then translation."""
    return " ".join(f"{v:.17g}" for v in transform.as_vector()) + "\n"


def pose_summary_text(result: RansacResult) -> str:
    return json.dumps(result.summary(), indent=2, sort_keys=True) + "\n"
