"""Synthetic image/point-cloud pairs with known pose and correlated features.

The camera sees a smooth, non-planar surface. Every occupied pixel carries one
surface point at its centre, further points hide behind the surface or lie
outside the view, and each point owns a latent descriptor. Image and point
features are the latents seen through per-modality channel gains plus noise, so
exact pixel-point correspondences are known by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .bundle import FeatureBundle
from .errors import DomainError
from .features import FeatureGrid, PointFeatureSet
from .geometry import CameraIntrinsics, RigidTransform
from .matching import CoarseMatches, FineMatches, PatchGeometry

KIND_FRONT, KIND_OCCLUDED, KIND_OUTSIDE = 0, 1, 2

# Independent random streams, one per scene component.
_STREAMS = ("pose", "surface", "layout", "latent", "background", "gain", "image_noise",
            "point_noise", "outlier", "fps", "duplicate")


@dataclass(frozen=True)
class NoiseSpec:
    descriptor_noise_sigma: float = 0.0
    channel_gain_jitter: float = 0.0  # log-normal spread of per-channel gains, per modality
    outlier_fraction: float = 0.0

    def __post_init__(self) -> None:
        if not self.descriptor_noise_sigma >= 0:
            raise DomainError("noise sigma must be nonnegative")
        if not self.channel_gain_jitter >= 0:
            raise DomainError("gain jitter must be nonnegative")
        if not 0 <= self.outlier_fraction < 1:
            raise DomainError("outlier fraction must lie in [0, 1)")


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 48
    channels: int = 64
    cell_size: int = 8
    focal: float = 60.0
    occupancy: float = 0.8  # share of pixels backed by a surface point
    occluded_fraction: float = 0.05  # relative to the number of surface points
    outside_fraction: float = 0.05
    outside_margin: float = 8.0  # pixels
    occlusion_offset: tuple[float, float] = (0.1, 0.3)  # metres behind the surface
    depth_range: tuple[float, float] = (2.0, 3.0)

    def __post_init__(self) -> None:
        if self.width < 16 or self.height < 16:
            raise DomainError("images must be at least 16x16")
        if self.width % self.cell_size or self.height % self.cell_size:
            raise DomainError("image size must be a multiple of the cell size")
        if not self.focal > 0:
            raise DomainError("degenerate frustum: focal length must be positive")
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise DomainError("degenerate frustum: depth range must be positive")
        if not 0 < self.occupancy <= 1:
            raise DomainError("occupancy must lie in (0, 1]")
        if self.channels < 1:
            raise DomainError("need at least one channel")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.height // self.cell_size, self.width // self.cell_size)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                                self.width, self.height)


@dataclass
class SceneSample:
    seed: int
    config: SceneConfig
    noise: NoiseSpec
    truth: RigidTransform  # cloud frame -> camera frame
    intrinsics: CameraIntrinsics
    points: np.ndarray  # (N, 3) cloud frame
    depth: np.ndarray  # (H, W), 0 where no surface
    fine_grid: FeatureGrid
    coarse_grid: FeatureGrid
    fine_points: PointFeatureSet
    coarse_points: PointFeatureSet
    geometry: PatchGeometry
    kind: np.ndarray  # (N,) front / occluded / outside
    source_pixel: np.ndarray  # (N,) flat pixel a point was generated on, -1 for outside points
    outlier_index: np.ndarray
    duplicate_blocks: list[tuple[int, int]] = field(default_factory=list)  # (row, col) block origins


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


def _surface(rng, cfg: SceneConfig):
    z0 = rng.uniform(*cfg.depth_range)
    a, b = rng.uniform(-0.3, 0.3, 2)
    amp = rng.uniform(0.1, 0.3)
    w1, w2 = rng.uniform(1.5, 3.0, 2)
    p1, p2 = rng.uniform(0, 2 * np.pi, 2)

    def depth_at(col, row):
        xn = 2.0 * col / (cfg.width - 1) - 1.0
        yn = 2.0 * row / (cfg.height - 1) - 1.0
        return z0 + a * xn + b * yn + amp * np.sin(w1 * xn + p1) * np.cos(w2 * yn + p2)

    return depth_at


def farthest_point_sample(points: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy farthest-point subsample from a random start; returns indices."""
    n = len(points)
    count = min(count, n)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = rng.integers(n)
    dist = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, count):
        chosen[i] = int(dist.argmax())
        dist = np.minimum(dist, ((points - points[chosen[i]]) ** 2).sum(axis=1))
    return chosen


def render_depth(points_cam: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """z-buffer: nearest point per pixel among points projecting within half a pixel of its centre.

    Returns the depth map and the winning point index per pixel (-1 where empty).
    """
    depth = np.zeros((K.height, K.width))
    owner = np.full((K.height, K.width), -1, dtype=np.int64)
    z = points_cam[:, 2]
    front = np.nonzero(z > 0)[0]
    uv = K.project(points_cam[front])
    col = np.rint(uv[:, 0]).astype(np.int64)
    row = np.rint(uv[:, 1]).astype(np.int64)
    inside = (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
    idx, row, col = front[inside], row[inside], col[inside]
    # Nearest first, so the first write per pixel wins; ties go to the lower index.
    order = np.lexsort((idx, z[idx]))
    flat = row[order] * K.width + col[order]
    _, first = np.unique(flat, return_index=True)
    win = order[first]
    depth[row[win], col[win]] = z[idx[win]]
    owner[row[win], col[win]] = idx[win]
    return depth, owner


def _place_blocks(rng, cfg: SceneConfig, copies: int, block: int, aligned: bool, tries: int = 500):
    """Non-overlapping square blocks; the first is the source, the rest its copies."""
    h, w = cfg.height, cfg.width
    if copies * block * block > h * w:
        raise DomainError(f"{copies} blocks of {block}x{block} px exceed the image area")
    placed: list[tuple[int, int]] = []
    for _ in range(copies):
        for _ in range(tries):
            if aligned:
                r = int(rng.integers(0, h // block)) * block
                c = int(rng.integers(0, w // block)) * block
            else:
                r = int(rng.integers(0, h - block + 1))
                c = int(rng.integers(0, w - block + 1))
            if all(abs(r - pr) >= block or abs(c - pc) >= block for pr, pc in placed):
                placed.append((r, c))
                break
        else:
            raise DomainError(f"could not place {copies} disjoint {block}x{block} blocks")
    return placed


def _build(seed: int, cfg: SceneConfig, noise: NoiseSpec, copies: int = 1, block_cells: int = 2,
           aligned: bool = False) -> SceneSample:
    rng = _streams(seed)
    K = cfg.intrinsics()
    H, W, C = cfg.height, cfg.width, cfg.channels
    depth_at = _surface(rng["surface"], cfg)

    occupied = rng["layout"].random((H, W)) < cfg.occupancy
    pixel_latent = rng["latent"].standard_normal((H, W, C))
    blocks: list[tuple[int, int]] = []
    if copies > 1:
        b = block_cells * cfg.cell_size
        blocks = _place_blocks(rng["duplicate"], cfg, copies, b, aligned)
        r0, c0 = blocks[0]
        for r, c in blocks[1:]:
            occupied[r:r + b, c:c + b] = occupied[r0:r0 + b, c0:c0 + b]
            pixel_latent[r:r + b, c:c + b] = pixel_latent[r0:r0 + b, c0:c0 + b]

    rows, cols = np.nonzero(occupied)
    n_front = len(rows)
    lay = rng["layout"]
    n_occ = int(round(cfg.occluded_fraction * n_front))
    n_out = int(round(cfg.outside_fraction * n_front))

    z_front = depth_at(cols, rows)
    occ_pick = lay.integers(0, n_front, n_occ)
    occ_rows, occ_cols = rows[occ_pick], cols[occ_pick]
    z_occ = z_front[occ_pick] + lay.uniform(*cfg.occlusion_offset, n_occ)

    # Outside points sit in a thin band around the image, off the pixel lattice.
    m = cfg.outside_margin
    side = lay.integers(0, 4, n_out)
    u_out = lay.uniform(-m, W - 1 + m, n_out)
    v_out = lay.uniform(-m, H - 1 + m, n_out)
    u_out = np.where(side == 0, lay.uniform(-m, -1, n_out), u_out)
    u_out = np.where(side == 1, lay.uniform(W, W - 1 + m, n_out), u_out)
    v_out = np.where(side == 2, lay.uniform(-m, -1, n_out), v_out)
    v_out = np.where(side == 3, lay.uniform(H, H - 1 + m, n_out), v_out)
    z_out = depth_at(u_out, v_out)

    uv = np.concatenate([np.stack([cols, rows], 1), np.stack([occ_cols, occ_rows], 1),
                         np.stack([u_out, v_out], 1)]).astype(np.float64)
    z = np.concatenate([z_front, z_occ, z_out])
    cam = K.backproject(uv, z)
    kind = np.concatenate([np.full(n_front, KIND_FRONT), np.full(n_occ, KIND_OCCLUDED),
                           np.full(n_out, KIND_OUTSIDE)])
    source = np.concatenate([rows * W + cols, occ_rows * W + occ_cols, np.full(n_out, -1)])
    n = len(z)
    if n < 64:
        raise DomainError(f"scene has only {n} points; at least 64 are required")

    pr = rng["pose"]
    truth = RigidTransform(Rotation.random(random_state=pr).as_matrix(), pr.uniform(-1.0, 1.0, 3))
    cloud = (cam - truth.translation) @ truth.rotation  # R^T (X - t)
    depth, _ = render_depth(cam, K)

    latent = np.empty((n, C))
    latent[:n_front] = pixel_latent[rows, cols]
    latent[n_front:] = rng["latent"].standard_normal((n - n_front, C))
    image_latent = np.where(occupied[..., None], pixel_latent, rng["background"].standard_normal((H, W, C)))

    gr = rng["gain"]
    s = noise.channel_gain_jitter
    gain_i = np.exp(s * gr.standard_normal(C))
    gain_p = np.exp(s * gr.standard_normal(C))
    sigma = noise.descriptor_noise_sigma
    fine_img = image_latent * gain_i + sigma * rng["image_noise"].standard_normal((H, W, C))
    pt_desc = latent * gain_p + sigma * rng["point_noise"].standard_normal((n, C))
    n_bad = int(np.floor(n * noise.outlier_fraction))
    orng = rng["outlier"]
    outliers = np.sort(orng.choice(n, size=n_bad, replace=False)) if n_bad else np.zeros(0, dtype=np.int64)
    pt_desc[outliers] = orng.standard_normal((n_bad, C))

    cs = cfg.cell_size
    gh, gw = cfg.grid_shape
    coarse = fine_img.reshape(gh, cs, gw, cs, C).mean(axis=(1, 3))

    nodes_idx = farthest_point_sample(cloud, gh * gw, rng["fps"])
    nodes = cloud[nodes_idx]
    _, patch = cKDTree(nodes).query(cloud)
    counts = np.bincount(patch, minlength=len(nodes)).astype(np.float64)
    patch_desc = np.zeros((len(nodes), C))
    np.add.at(patch_desc, patch, pt_desc)
    patch_desc /= counts[:, None]

    return SceneSample(
        seed=seed, config=cfg, noise=noise, truth=truth, intrinsics=K, points=cloud, depth=depth,
        fine_grid=FeatureGrid(fine_img, "fine"), coarse_grid=FeatureGrid(coarse, "coarse"),
        fine_points=PointFeatureSet(pt_desc, cloud), coarse_points=PointFeatureSet(patch_desc, nodes),
        geometry=PatchGeometry(cs, (gh, gw), patch.astype(np.int64)),
        kind=kind, source_pixel=source.astype(np.int64), outlier_index=outliers.astype(np.int64),
        duplicate_blocks=blocks,
    )


def generate_scene(seed: int = 0, config: SceneConfig = SceneConfig(), noise: NoiseSpec = NoiseSpec()) -> SceneSample:
    """Deterministic scene for a seed; identical arguments give bitwise-identical output."""
    return _build(int(seed), config, noise)


def duplicate_structure_scene(seed: int = 0, copies: int = 2, config: SceneConfig = SceneConfig(),
                              noise: NoiseSpec = NoiseSpec(), block_cells: int = 2,
                              aligned: bool = False) -> SceneSample:
    """Scene whose image repeats a block of surface (pixels and latents) at ``copies`` disjoint spots.

    The copies land on different parts of the surface, so the same descriptors
    appear at distinct 3D locations.
    """
    if copies < 1:
        raise DomainError(f"copies must be >= 1, got {copies}")
    if copies == 1:
        return generate_scene(seed, config, noise)
    return _build(int(seed), config, noise, copies, block_cells, aligned)


def ground_truth_correspondences(scene: SceneSample) -> FineMatches:
    """Pixel-point pairs where the point projects into the pixel and wins its z-buffer."""
    cam = scene.truth.apply(scene.points)
    _, owner = render_depth(cam, scene.intrinsics)
    rows, cols = np.nonzero(owner >= 0)
    pts = owner[rows, cols]
    return FineMatches(np.stack([rows, cols], 1).astype(np.int64), pts.astype(np.int64),
                       np.ones(len(pts)), np.full(len(pts), -1, dtype=np.int64))


def cell_patch_overlap(scene: SceneSample) -> np.ndarray:
    """(cells, patches) counts of ground-truth pixel-point pairs falling in each cell and patch."""
    gt = ground_truth_correspondences(scene)
    cs = scene.config.cell_size
    gw = scene.config.grid_shape[1]
    cell = (gt.pixels[:, 0] // cs) * gw + gt.pixels[:, 1] // cs
    patch = scene.geometry.point_patch[gt.point_index]
    n_cells = scene.config.grid_shape[0] * gw
    ov = np.zeros((n_cells, scene.coarse_points.count), dtype=np.int64)
    np.add.at(ov, (cell, patch), 1)
    return ov


def ground_truth_coarse(scene: SceneSample) -> CoarseMatches:
    """Cell-patch pairs that are each other's best overlap."""
    ov = cell_patch_overlap(scene)
    best_p = ov.argmax(axis=1)
    best_c = ov.argmax(axis=0)
    cells = np.nonzero((ov.max(axis=1) > 0) & (best_c[best_p] == np.arange(len(ov))))[0]
    patches = best_p[cells]
    return CoarseMatches(cells, patches, ov[cells, patches].astype(np.float64))


def scene_to_bundle(scene: SceneSample) -> FeatureBundle:
    meta = {
        "seed": scene.seed,
        "cell_size": scene.config.cell_size,
        "grid_shape": list(scene.config.grid_shape),
    }
    arrays = {
        "depth": scene.depth,
        "point_patch": scene.geometry.point_patch.astype(np.float64),
    }
    return FeatureBundle(
        grids={"coarse": scene.coarse_grid, "fine": scene.fine_grid},
        points={"coarse": scene.coarse_points, "fine": scene.fine_points},
        intrinsics=scene.intrinsics, pose=scene.truth, arrays=arrays, meta=meta,
    )
