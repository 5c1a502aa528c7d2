"""Registration metrics (IR, FMR, RR, PIR) and the MMD modality-gap statistic.

All threshold tests are strict: a value exactly at its threshold does not pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .geometry import CameraIntrinsics, RigidTransform


@dataclass(frozen=True)
class MetricThresholds:
    tau1: float = 0.05  # inlier distance, metres
    tau2: float = 0.1  # inlier-ratio cutoff for FMR
    tau3: float = 0.1  # RMSE cutoff for RR, metres
    pir_radius: float | None = None  # metres; None means the patch-node spacing

    def __post_init__(self) -> None:
        for name in ("tau1", "tau2", "tau3"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.pir_radius is not None and not self.pir_radius > 0:
            raise DomainError("pir_radius must be positive")


def lift_pixels(pixels, depth: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Back-project integer (row, col) pixels with the depth map; returns camera points and a validity mask."""
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64)
    inside = (px[:, 0] >= 0) & (px[:, 0] < d.shape[0]) & (px[:, 1] >= 0) & (px[:, 1] < d.shape[1])
    z = np.zeros(len(px))
    z[inside] = d[px[inside, 0], px[inside, 1]]
    valid = inside & (z > 0) & np.isfinite(z)
    uv = px[:, ::-1].astype(np.float64)
    return K.backproject(uv, z), valid


@dataclass(frozen=True)
class InlierStats:
    ratio: float
    inliers: int
    evaluated: int
    missing_depth: int


def inlier_stats(pixels, point_positions, truth: RigidTransform, depth, K: CameraIntrinsics,
                 tau1: float = 0.05) -> InlierStats:
    """Share of pairs whose truth-transformed point lies strictly within tau1 of the lifted pixel.

    Pairs whose pixel has no valid depth are left out of both counts.
    """
    px = np.asarray(pixels).reshape(-1, 2)
    pts = np.asarray(point_positions, dtype=np.float64).reshape(-1, 3)
    if len(px) == 0:
        raise ShapeError("inlier ratio needs at least one correspondence")
    if len(px) != len(pts):
        raise ShapeError("pixel and point lists differ in length")
    lifted, valid = lift_pixels(px, depth, K)
    if not valid.any():
        raise DomainError("no correspondence has a valid depth")
    dist = np.linalg.norm(truth.apply(pts[valid]) - lifted[valid], axis=1)
    hits = int((dist < tau1).sum())
    n = int(valid.sum())
    return InlierStats(hits / n, hits, n, int(len(px) - n))


def inlier_ratio(pixels, point_positions, truth, depth, K, tau1: float = 0.05) -> float:
    return inlier_stats(pixels, point_positions, truth, depth, K, tau1).ratio


def _nonempty(values: Sequence[float], what: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ShapeError(f"{what} needs at least one value")
    return v


def feature_matching_recall(inlier_ratios: Sequence[float], tau2: float = 0.1) -> float:
    return float(np.mean(_nonempty(inlier_ratios, "FMR") > tau2))


def registration_recall(rmses: Sequence[float], tau3: float = 0.1) -> float:
    return float(np.mean(_nonempty(rmses, "RR") < tau3))


def node_spacing(nodes: np.ndarray) -> float:
    """Mean distance from each patch node to its nearest neighbour."""
    p = np.asarray(nodes, dtype=np.float64)
    if len(p) < 2:
        raise ShapeError("spacing needs at least two nodes")
    d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).mean())


def lift_cell_centres(image_index, geometry, depth, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Lift each cell's centre pixel with the cell's median valid depth; cells without depth are invalid."""
    idx = np.asarray(image_index, dtype=np.int64).reshape(-1)
    d = np.asarray(depth, dtype=np.float64)
    out = np.zeros((len(idx), 3))
    valid = np.zeros(len(idx), dtype=bool)
    for x, m in enumerate(idx):
        rs, cs = geometry.window(int(m), d.shape)
        block = d[rs, cs]
        good = block[block > 0]
        if good.size == 0:
            continue
        r, c = geometry.cell_center(int(m))
        out[x] = K.backproject(np.array([[c, r]]), np.array([np.median(good)]))[0]
        valid[x] = True
    return out, valid


def patch_inlier_ratio(coarse, truth: RigidTransform, geometry, nodes, depth, K: CameraIntrinsics,
                       radius: float | None = None) -> float:
    """Share of coarse pairs whose truth-transformed patch node lies strictly within radius of the lifted cell centre.

    Cells with no valid depth count as incorrect.
    """
    if len(coarse) == 0:
        raise ShapeError("PIR needs at least one coarse pair")
    nodes = np.asarray(nodes, dtype=np.float64)
    r = node_spacing(nodes) if radius is None else radius
    lifted, valid = lift_cell_centres(coarse.image_index, geometry, depth, K)
    moved = truth.apply(nodes[np.asarray(coarse.point_index)])
    ok = valid & (np.linalg.norm(moved - lifted, axis=1) < r)
    return float(ok.mean())


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.vstack([a, b])
    d = np.sqrt(_sq_dists(pooled, pooled))
    upper = d[np.triu_indices(len(pooled), 1)]
    med = float(np.median(upper)) if upper.size else 0.0
    return med if med > 0 else 1.0


def mmd(sample_a, sample_b, bandwidth: float | None = None) -> float:
    """Biased Gaussian-kernel MMD, returned as a distance (square root of the V-statistic)."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim == 0 or b.ndim == 0 or len(a) == 0 or len(b) == 0:
        raise ShapeError("MMD needs two non-empty samples")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ShapeError("samples differ in dimension")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DomainError("MMD inputs must be finite")
    sigma = median_bandwidth(a, b) if bandwidth is None else bandwidth
    if not sigma > 0:
        raise DomainError("bandwidth must be positive")
    k = lambda x, y: np.exp(-_sq_dists(x, y) / (2.0 * sigma**2)).mean()
    stat = k(a, a) + k(b, b) - 2.0 * k(a, b)
    return float(np.sqrt(max(stat, 0.0)))


@dataclass(frozen=True)
class PairEvaluation:
    inlier_ratio: float
    rmse: float
    registered: bool
    patch_inlier_ratio: float
    fine_pairs: int = 0
    coarse_pairs: int = 0
    missing_depth: int = 0


def evaluation_rows_text(rows: Sequence[tuple[str, PairEvaluation]], th: MetricThresholds = MetricThresholds()) -> str:
    """Fixed-column table: one line per scene, then the mean over scenes."""
    head = f"{'scene':<16}{'PIR':>8}{'IR':>8}{'FMR':>8}{'RR':>8}{'RMSE':>12}{'coarse':>8}{'fine':>8}"
    lines = [head]
    for name, e in rows:
        fmr = 100.0 * (e.inlier_ratio > th.tau2)
        lines.append(
            f"{name:<16}{100 * e.patch_inlier_ratio:8.1f}{100 * e.inlier_ratio:8.1f}{fmr:8.1f}"
            f"{100.0 * e.registered:8.1f}{e.rmse:12.6f}{e.coarse_pairs:8d}{e.fine_pairs:8d}"
        )
    if rows:
        ev = [e for _, e in rows]
        lines.append(
            f"{'mean':<16}{100 * np.mean([e.patch_inlier_ratio for e in ev]):8.1f}"
            f"{100 * np.mean([e.inlier_ratio for e in ev]):8.1f}"
            f"{100 * feature_matching_recall([e.inlier_ratio for e in ev], th.tau2):8.1f}"
            f"{100 * np.mean([e.registered for e in ev]):8.1f}"
            f"{np.mean([e.rmse for e in ev]):12.6f}"
            f"{np.mean([e.coarse_pairs for e in ev]):8.1f}{np.mean([e.fine_pairs for e in ev]):8.1f}"
        )
    return "\n".join(lines) + "\n"
