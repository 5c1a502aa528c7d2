import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2preg.errors import DomainError, ShapeError
from i2preg.geometry import CameraIntrinsics, RigidTransform
from i2preg.matching import CoarseMatches, PatchGeometry
from i2preg.metrics import (
    MetricThresholds,
    PairEvaluation,
    evaluation_rows_text,
    feature_matching_recall,
    inlier_ratio,
    inlier_stats,
    lift_pixels,
    mmd,
    node_spacing,
    patch_inlier_ratio,
    registration_recall,
)

K = CameraIntrinsics(10.0, 10.0, 1.5, 1.5, 4, 4)
DEPTH = np.full((4, 4), 2.0)


def pose():
    from scipy.spatial.transform import Rotation
    return RigidTransform(Rotation.from_rotvec([0.1, -0.2, 0.3]).as_matrix(), [0.2, 0.1, -0.3])


def exact_points(truth, pixels):
    cam, _ = lift_pixels(pixels, DEPTH, K)
    return truth.inverse().apply(cam)


PIXELS = np.array([[0, 0], [1, 2], [3, 3], [2, 1], [0, 3]])


def test_ir_exact_construction():
    t = pose()
    assert inlier_ratio(PIXELS, exact_points(t, PIXELS), t, DEPTH, K) == 1.0


def test_ir_uniform_displacement():
    t = pose()
    pts = exact_points(t, PIXELS) + t.rotation.T @ np.array([0.1, 0.0, 0.0])
    assert inlier_ratio(PIXELS, pts, t, DEPTH, K) == 0.0


def test_ir_mixed_fixture_loop():
    t = pose()
    pts = exact_points(t, PIXELS)
    offsets = np.array([0.0, 0.02, 0.08, 0.049, 0.2])
    pts = pts + offsets[:, None] * (t.rotation.T @ np.array([0.0, 0.0, 1.0]))
    cam, _ = lift_pixels(PIXELS, DEPTH, K)
    loop = sum(np.linalg.norm(t.apply(p[None])[0] - c) < 0.05 for p, c in zip(pts, cam)) / 5
    assert loop == 0.6
    assert inlier_ratio(PIXELS, pts, t, DEPTH, K) == pytest.approx(0.6)


def test_ir_missing_depth_and_permutation():
    t = pose()
    pts = exact_points(t, PIXELS)
    depth = DEPTH.copy()
    depth[3, 3] = 0.0
    s = inlier_stats(PIXELS, pts, t, depth, K)
    assert (s.evaluated, s.missing_depth, s.ratio) == (4, 1, 1.0)
    perm = np.random.default_rng(0).permutation(5)
    pts2 = pts.copy()
    pts2[1] += 1.0
    assert inlier_ratio(PIXELS[perm], pts2[perm], t, DEPTH, K) == inlier_ratio(PIXELS, pts2, t, DEPTH, K)


def test_ir_errors():
    with pytest.raises(ShapeError):
        inlier_ratio(np.zeros((0, 2)), np.zeros((0, 3)), pose(), DEPTH, K)
    with pytest.raises(DomainError):
        inlier_ratio(PIXELS, np.zeros((5, 3)), pose(), np.zeros((4, 4)), K)


def test_fmr_examples():
    assert feature_matching_recall([1.0, 1.0]) == 1.0
    assert feature_matching_recall([0.05, 0.15], 0.1) == 0.5
    assert feature_matching_recall([0.1, 0.1], 0.1) == 0.0
    with pytest.raises(ShapeError):
        feature_matching_recall([])


def test_rr_examples():
    assert registration_recall([0.0, 0.0]) == 1.0
    assert registration_recall([0.05, 0.2], 0.1) == 0.5
    assert registration_recall([0.1, 0.1], 0.1) == 0.0
    with pytest.raises(ShapeError):
        registration_recall([])


@settings(max_examples=40)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_recalls_are_ratios(values):
    assert 0.0 <= feature_matching_recall(values) <= 1.0
    assert 0.0 <= registration_recall(values) <= 1.0


def test_thresholds_validation():
    with pytest.raises(DomainError):
        MetricThresholds(tau1=0)
    with pytest.raises(DomainError):
        MetricThresholds(pir_radius=-1.0)


GEO = PatchGeometry(2, (2, 2), np.arange(4))


def cell_nodes(truth):
    """Point-patch nodes placed exactly on the lifted cell centres."""
    centres = [GEO.cell_center(m) for m in range(4)]
    uv = np.array([[c, r] for r, c in centres])
    return truth.inverse().apply(K.backproject(uv, np.full(4, 2.0)))


def test_pir_ground_truth_pairs():
    t = pose()
    coarse = CoarseMatches(np.arange(4), np.arange(4), np.ones(4))
    assert patch_inlier_ratio(coarse, t, GEO, cell_nodes(t), DEPTH, K) == 1.0


def test_pir_derangement():
    t = pose()
    coarse = CoarseMatches(np.arange(4), np.array([1, 0, 3, 2]), np.ones(4))
    assert patch_inlier_ratio(coarse, t, GEO, cell_nodes(t), DEPTH, K, radius=0.1) == 0.0


def test_pir_half_correct_and_missing_depth():
    t = pose()
    nodes = cell_nodes(t)
    coarse = CoarseMatches(np.arange(4), np.array([0, 1, 3, 2]), np.ones(4))
    assert patch_inlier_ratio(coarse, t, GEO, nodes, DEPTH, K, radius=0.1) == 0.5
    depth = DEPTH.copy()
    depth[:2, :2] = 0.0  # cell 0 loses all depth
    assert patch_inlier_ratio(coarse, t, GEO, nodes, depth, K, radius=0.1) == 0.25
    with pytest.raises(ShapeError):
        patch_inlier_ratio(CoarseMatches(np.zeros(0, int), np.zeros(0, int), np.zeros(0)), t, GEO, nodes, DEPTH, K)


def test_node_spacing():
    assert node_spacing(np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])) == pytest.approx((1 + 1 + 2) / 3)


def test_mmd_identical():
    a = np.random.default_rng(0).normal(size=(20, 3))
    assert mmd(a, a) < 1e-12


@pytest.mark.parametrize("d,sigma", [(0.5, 1.0), (2.0, 0.7), (1.0, 3.0)])
def test_mmd_singletons_closed_form(d, sigma):
    got = mmd(np.array([[0.0, 0.0]]), np.array([[d, 0.0]]), bandwidth=sigma)
    assert got == pytest.approx(math.sqrt(2 - 2 * math.exp(-d * d / (2 * sigma * sigma))), rel=1e-13)


def test_mmd_separated_clusters_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 2)) * 0.3
    b = rng.normal(size=(5, 2)) * 0.3 + [50.0, 0.0]
    sigma = 1.0
    k = lambda x, y: math.exp(-float(((x - y) ** 2).sum()) / (2 * sigma * sigma))
    kaa = sum(k(x, y) for x in a for y in a) / 36
    kbb = sum(k(x, y) for x in b for y in b) / 25
    kab = sum(k(x, y) for x in a for y in b) / 30
    got = mmd(a, b, bandwidth=sigma)
    assert got == pytest.approx(math.sqrt(kaa + kbb - 2 * kab), rel=1e-12)
    # cross term vanishes, leaving the within-cluster mass
    assert got == pytest.approx(math.sqrt(kaa + kbb), rel=1e-9)


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_mmd_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(9, 3)) + 0.5
    assert mmd(a, b) >= 0
    assert mmd(a, b) == pytest.approx(mmd(b, a), rel=1e-12)


def test_mmd_errors():
    with pytest.raises(DomainError):
        mmd(np.array([[np.nan]]), np.array([[0.0]]))
    with pytest.raises(ShapeError):
        mmd(np.zeros((0, 2)), np.zeros((1, 2)))
    with pytest.raises(DomainError):
        mmd(np.zeros((1, 2)), np.ones((1, 2)), bandwidth=0.0)


def test_rows_text_layout():
    rows = [("a", PairEvaluation(0.5, 0.01, True, 0.75, 10, 4)), ("b", PairEvaluation(0.05, 0.3, False, 0.25, 3, 2))]
    text = evaluation_rows_text(rows)
    lines = text.splitlines()
    assert lines[0].split() == ["scene", "PIR", "IR", "FMR", "RR", "RMSE", "coarse", "fine"]
    assert lines[-1].split()[:5] == ["mean", "50.0", "27.5", "50.0", "50.0"]
