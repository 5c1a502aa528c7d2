"""Score maps, entropic optimal transport and coarse-to-fine correspondence selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, ShapeError
from .features import FeatureGrid, PointFeatureSet

MODES = ("mutual_argmax", "topk")


def cosine_score_map(f_image: np.ndarray, f_points: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity (M, N); rows with zero norm score 0 against everything."""
    a = np.asarray(f_image, dtype=np.float64)
    b = np.asarray(f_points, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"score map needs (M, C) and (N, C) inputs, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ua = np.divide(a, na[:, None], out=np.zeros_like(a), where=na[:, None] > 0)
    ub = np.divide(b, nb[:, None], out=np.zeros_like(b), where=nb[:, None] > 0)
    return np.clip(ua @ ub.T, -1.0, 1.0)


@dataclass(frozen=True)
class TransportPlan:
    values: np.ndarray
    epsilon: float
    iterations: int
    violation: float
    converged: bool
    newton_steps: int = 0
    history: tuple[float, ...] = ()

    @property
    def row_marginal(self) -> np.ndarray:
        return np.full(self.values.shape[0], 1.0 / self.values.shape[0])

    @property
    def col_marginal(self) -> np.ndarray:
        return np.full(self.values.shape[1], 1.0 / self.values.shape[1])

    def cost(self, cost: np.ndarray) -> float:
        return float(np.sum(self.values * cost))


def marginal_violation(plan: np.ndarray) -> float:
    """L1 distance of row and column sums to the uniform marginals."""
    m, n = plan.shape
    return float(np.abs(plan.sum(axis=1) - 1.0 / m).sum() + np.abs(plan.sum(axis=0) - 1.0 / n).sum())


class _LogDomain:
    """Dual potentials (f, g) for cost C at regularization eps; plan = exp((f + g - C) / eps)."""

    def __init__(self, cost: np.ndarray):
        self.cost = cost
        m, n = cost.shape
        self.a = np.full(m, 1.0 / m)
        self.b = np.full(n, 1.0 / n)
        self.log_a = np.log(self.a)
        self.log_b = np.log(self.b)

    def plan(self, f, g, eps):
        return np.exp((f[:, None] + g[None, :] - self.cost) / eps)

    def sweep(self, f, g, eps):
        f = eps * (self.log_a - logsumexp((g[None, :] - self.cost) / eps, axis=1))
        g = eps * (self.log_b - logsumexp((f[:, None] - self.cost) / eps, axis=0))
        return f, g

    def dual(self, f, g, eps):
        s = logsumexp((f[:, None] + g[None, :] - self.cost) / eps)
        if s > 700:
            return -np.inf
        return f @ self.a + g @ self.b - eps * np.exp(s)

    def newton(self, f, g, eps, tol, max_steps=50):
        """Damped Newton ascent on the dual; every accepted step is followed by one sweep."""
        m = len(f)
        steps = 0
        for _ in range(max_steps):
            t = self.plan(f, g, eps)
            if marginal_violation(t) < tol:
                break
            r, c = t.sum(axis=1), t.sum(axis=0)
            grad = np.concatenate([self.a - r, self.b - c])
            hess = np.block([[np.diag(r), t], [t.T, np.diag(c)]]) / eps
            # The Hessian has a null direction (f + s, g - s); lstsq picks the minimum-norm step.
            d = np.linalg.lstsq(hess, grad, rcond=None)[0]
            base = self.dual(f, g, eps)
            slope = grad @ d
            step, accepted = 1.0, False
            while step > 1e-6:
                fn, gn = f + step * d[:m], g + step * d[m:]
                if self.dual(fn, gn, eps) >= base + 1e-4 * step * slope:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            f, g = self.sweep(fn, gn, eps)
            steps += 1
        return f, g, steps


def _check_problem(cost, epsilon):
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ShapeError(f"cost must be a non-empty matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DomainError("cost matrix contains non-finite values")
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    return c


def sinkhorn(cost, epsilon: float = 0.05, max_iters: int = 100, tol: float = 1e-6,
             polish: bool = False, record_history: bool = False) -> TransportPlan:
    """Log-domain Sinkhorn with uniform marginals 1/M and 1/N.

    Starts from the Gibbs kernel scaled to unit mass and stops once the L1
    marginal violation drops below ``tol`` or after ``max_iters`` sweeps.

    Plain scaling slows to a crawl for small epsilon. With ``polish=True`` the
    solver instead anneals epsilon down from the cost range (a few sweeps plus
    Newton per stage, warm-started) and finishes with Newton steps at the
    target epsilon; ``max_iters`` then bounds the sweeps of the final stage.
    """
    c = _check_problem(cost, epsilon)
    dom = _LogDomain(c)
    m, n = c.shape
    lo = float(c.min())
    f = np.full(m, lo - epsilon * logsumexp(-(c - lo) / epsilon))
    g = np.zeros(n)
    history: list[float] = []
    sweeps = 0
    newton_steps = 0

    if polish:
        eps = max(epsilon, float(c.max() - c.min()))
        while eps > epsilon:
            for _ in range(10):
                f, g = dom.sweep(f, g, eps)
                sweeps += 1
            f, g, k = dom.newton(f, g, eps, 1e-3)
            newton_steps += k
            eps = max(epsilon, eps / 2)

    viol = marginal_violation(dom.plan(f, g, epsilon))
    if record_history:
        history.append(viol)
    it = 0
    while viol >= tol and it < max_iters:
        f, g = dom.sweep(f, g, epsilon)
        it += 1
        viol = marginal_violation(dom.plan(f, g, epsilon))
        if record_history:
            history.append(viol)
        if polish and it >= 10:
            break
    if polish and viol >= tol:
        f, g, k = dom.newton(f, g, epsilon, tol)
        newton_steps += k
        viol = marginal_violation(dom.plan(f, g, epsilon))
    values = dom.plan(f, g, epsilon)
    return TransportPlan(values, float(epsilon), sweeps + it, viol, bool(viol < tol),
                         newton_steps, tuple(history))


@dataclass(frozen=True)
class CoarseMatches:
    image_index: np.ndarray
    point_index: np.ndarray
    confidence: np.ndarray

    def __len__(self) -> int:
        return len(self.image_index)

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(self.image_index, self.point_index)]


def extract_coarse(plan, score=None, mode: str = "mutual_argmax", k: int = 1) -> CoarseMatches:
    """Select patch-level pairs.

    mutual_argmax keeps (m, n) when n is the best column of row m and m the best
    row of column n in the plan; confidence is the plan entry times M (row mass
    normalized). topk keeps the k best score entries per row, scored by similarity.
    """
    if mode not in MODES:
        raise DomainError(f"unknown extraction mode {mode!r}")
    if mode == "topk":
        if score is None:
            raise ShapeError("topk extraction needs a score map")
        s = np.asarray(score, dtype=np.float64)
        if s.size == 0:
            raise ShapeError("empty score map")
        if k < 1:
            raise DomainError(f"k must be at least 1, got {k}")
        kk = min(k, s.shape[1])
        order = np.argsort(-s, axis=1, kind="stable")[:, :kk]
        rows = np.repeat(np.arange(s.shape[0]), kk)
        cols = order.ravel()
        return CoarseMatches(rows, cols, s[rows, cols])

    t = np.asarray(getattr(plan, "values", plan), dtype=np.float64)
    if t.size == 0:
        raise ShapeError("empty transport plan")
    if score is not None and np.shape(score) != t.shape:
        raise ShapeError(f"plan {t.shape} and score {np.shape(score)} disagree")
    best_col = t.argmax(axis=1)
    best_row = t.argmax(axis=0)
    rows = np.nonzero(best_row[best_col] == np.arange(t.shape[0]))[0]
    cols = best_col[rows]
    return CoarseMatches(rows, cols, t[rows, cols] * t.shape[0])


def many_to_one_count(coarse: CoarseMatches) -> int:
    """Number of surplus image patches attached to an already-used point patch."""
    if len(coarse) == 0:
        return 0
    counts = np.bincount(coarse.point_index)
    return int(np.maximum(counts - 1, 0).sum())


@dataclass(frozen=True)
class PatchGeometry:
    """Coarse cells of ``cell_size`` pixels on a (rows, cols) grid; ``point_patch[i]`` is fine point i's patch."""

    cell_size: int
    grid_shape: tuple[int, int]
    point_patch: np.ndarray

    def window(self, image_index: int, fine_shape: tuple[int, int]) -> tuple[slice, slice]:
        rows, cols = self.grid_shape
        if not 0 <= image_index < rows * cols:
            raise ShapeError(f"image patch {image_index} outside a {rows}x{cols} grid")
        r, c = divmod(int(image_index), cols)
        cs = self.cell_size
        return (slice(r * cs, min((r + 1) * cs, fine_shape[0])),
                slice(c * cs, min((c + 1) * cs, fine_shape[1])))

    def members(self, point_index: int) -> np.ndarray:
        return np.nonzero(self.point_patch == point_index)[0]

    def cell_center(self, image_index: int) -> tuple[float, float]:
        """Pixel (row, col) of a cell's centre, in the pixel-centre convention."""
        r, c = divmod(int(image_index), self.grid_shape[1])
        half = self.cell_size / 2.0
        return (r * self.cell_size + half - 0.5, c * self.cell_size + half - 0.5)


@dataclass
class FineMatches:
    pixels: np.ndarray  # (K, 2) integer (row, col)
    point_index: np.ndarray
    confidence: np.ndarray
    coarse_index: np.ndarray
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.point_index)


@dataclass
class CorrespondenceSet:
    coarse: CoarseMatches
    fine: FineMatches


def refine_fine(coarse: CoarseMatches, fine_image: FeatureGrid, fine_points: PointFeatureSet,
                geometry: PatchGeometry, accept_threshold: float = 0.5) -> FineMatches:
    """Match each pixel in a coarse pair's window to its most similar point in the paired patch."""
    h, w = fine_image.height, fine_image.width
    best: dict[int, tuple[float, int, int]] = {}
    skipped: list[tuple[int, str]] = []
    for x, (mi, pj) in enumerate(zip(coarse.image_index, coarse.point_index)):
        rs, cs = geometry.window(int(mi), (h, w))
        members = geometry.members(int(pj))
        if rs.stop <= rs.start or cs.stop <= cs.start:
            skipped.append((x, "empty image window"))
            continue
        if len(members) == 0:
            skipped.append((x, "empty point patch"))
            continue
        block = fine_image.values[rs, cs]
        feats = block.reshape(-1, block.shape[-1])
        sim = cosine_score_map(feats, fine_points.descriptors[members])
        nn = sim.argmax(axis=1)
        conf = sim[np.arange(len(nn)), nn]
        rr, cc = np.meshgrid(np.arange(rs.start, rs.stop), np.arange(cs.start, cs.stop), indexing="ij")
        for flat, s, p in zip((rr * w + cc).ravel(), conf, members[nn]):
            if s < accept_threshold:
                continue
            prev = best.get(int(flat))
            if prev is None or s > prev[0]:
                best[int(flat)] = (float(s), int(p), x)
    keys = sorted(best)
    pixels = np.array([divmod(k, w) for k in keys], dtype=np.int64).reshape(-1, 2)
    return FineMatches(
        pixels,
        np.array([best[k][1] for k in keys], dtype=np.int64),
        np.array([best[k][0] for k in keys], dtype=np.float64),
        np.array([best[k][2] for k in keys], dtype=np.int64),
        skipped,
    )


def correspondences_text(fine: FineMatches, positions: np.ndarray) -> str:
    """One whitespace-separated record per fine pair: row col point x y z confidence."""
    lines = ["# row col point x y z confidence"]
    for (r, c), p, s in zip(fine.pixels, fine.point_index, fine.confidence):
        x, y, z = positions[p]
        lines.append(f"{r} {c} {p} {x:.9g} {y:.9g} {z:.9g} {s:.9g}")
    return "\n".join(lines) + "\n"
