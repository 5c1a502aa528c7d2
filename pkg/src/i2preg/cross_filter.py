"""Cross-modal channel filtering.

Per sample: instance-normalize, form the channel second-moment matrix, then
measure how much those matrices disagree across the image and point modalities.
Channel pairs in the top third of that spread are masked (upper triangle only)
and their co-activation is removed from the normalized features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError

DEFAULT_EPS = 1e-5


def instance_normalize(sample: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """(x - mean_t) / (std_t + eps) per channel t, population std over rows."""
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected an (elements, channels) matrix, got {x.shape}")
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    return (x - mu) / (sigma + eps)


def second_moment(normalized: np.ndarray, element_count: int | None = None) -> np.ndarray:
    """(1/n) F^T F, symmetrized so the result equals its transpose bit for bit."""
    f = np.asarray(normalized, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ShapeError("second moment needs a non-empty (elements, channels) matrix")
    n = f.shape[0] if element_count is None else element_count
    if n != f.shape[0]:
        raise ShapeError(f"element count {n} does not match {f.shape[0]} rows")
    v = f.T @ f / n
    upper = np.triu(v)
    return upper + np.triu(v, 1).T


@dataclass(frozen=True)
class CrossModalCovariance:
    values: np.ndarray
    mean: np.ndarray
    iteration: int = 0


def cross_modal_covariance(v_image, v_points, iteration: int = 0) -> CrossModalCovariance:
    """Elementwise spread of the 2B second-moment matrices about their mean."""
    vi = np.asarray(v_image, dtype=np.float64)
    vp = np.asarray(v_points, dtype=np.float64)
    if vi.ndim == 2:
        vi = vi[None]
    if vp.ndim == 2:
        vp = vp[None]
    if vi.shape != vp.shape or vi.ndim != 3 or vi.shape[1] != vi.shape[2]:
        raise ShapeError(f"moment batches disagree: {vi.shape} vs {vp.shape}")
    stacked = np.concatenate([vi, vp])
    mu = stacked.mean(axis=0)
    cov = ((stacked - mu) ** 2).mean(axis=0)
    return CrossModalCovariance(cov, mu, iteration)


def build_mask(cov) -> np.ndarray:
    """Binary mask of the top equal-width third of covariance values, strict upper triangle."""
    c = np.asarray(getattr(cov, "values", cov), dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
        raise ShapeError(f"mask construction needs a square matrix with C >= 2, got {c.shape}")
    lo, hi = c.min(), c.max()
    if not hi > lo:
        # No spread, nothing stands out.
        return np.zeros(c.shape, dtype=np.float64)
    cut = lo + 2.0 * (hi - lo) / 3.0
    mask = (c >= cut).astype(np.float64)
    return np.triu(mask, 1)


def _as_stack(moments) -> np.ndarray:
    m = np.asarray(moments, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    return m


def filter_loss(moments_image, moments_points, masks) -> float:
    """Mean over iterations of |V_I * M|_1 + |V_P * M|_1.

    Moments are (X, C, C), or (X, B, C, C) in which case the batch is averaged.
    """
    vi, vp, m = _as_stack(moments_image), _as_stack(moments_points), _as_stack(masks)
    if not (len(vi) == len(vp) == len(m)) or len(m) == 0:
        raise ShapeError(f"iteration counts disagree: {len(vi)}, {len(vp)}, {len(m)}")
    if vi.shape != vp.shape:
        raise ShapeError(f"moment shapes disagree: {vi.shape} vs {vp.shape}")
    if vi.ndim == 4:
        mk = m[:, None]
        per = (np.abs(vi * mk).sum(axis=(2, 3)) + np.abs(vp * mk).sum(axis=(2, 3))).mean(axis=1)
    else:
        per = np.abs(vi * m).sum(axis=(1, 2)) + np.abs(vp * m).sum(axis=(1, 2))
    return float(per.mean())


def filter_loss_grad(moments_image, moments_points, masks) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``filter_loss`` with respect to each moment entry (masks fixed)."""
    vi, vp, m = _as_stack(moments_image), _as_stack(moments_points), _as_stack(masks)
    scale = 1.0 / len(m)
    if vi.ndim == 4:
        m = m[:, None]
        scale /= vi.shape[1]
    return scale * np.sign(vi) * m, scale * np.sign(vp) * m


def masked_pairs(mask: np.ndarray) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(mask)
    return [(int(i), int(j)) for i, j in zip(rows, cols)]


def decorrelate_pairs(normalized: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """For each masked (i, j), in row-major order, drop channel j's least-squares fit on channel i."""
    f = np.array(normalized, dtype=np.float64)
    for i, j in masked_pairs(mask):
        denom = f[:, i] @ f[:, i]
        if denom > 0:
            f[:, j] -= (f[:, i] @ f[:, j]) / denom * f[:, i]
    return f


@dataclass
class CmcfIteration:
    covariance: np.ndarray
    mask: np.ndarray
    pairs: list[tuple[int, int]]


@dataclass
class CmcfResult:
    image: list[np.ndarray]
    points: list[np.ndarray]
    loss: float
    moments_image: np.ndarray  # (X, B, C, C)
    moments_points: np.ndarray
    iterations: list[CmcfIteration] = field(default_factory=list)

    def diagnostics_text(self) -> str:
        """JSON summary: per iteration, covariance range, mask size and masked pairs."""
        doc = {
            "loss": self.loss,
            "iterations": [
                {
                    "index": x,
                    "cov_min": float(it.covariance.min()),
                    "cov_max": float(it.covariance.max()),
                    "cov_mean": float(it.covariance.mean()),
                    "masked_count": len(it.pairs),
                    "masked_pairs": [list(p) for p in it.pairs],
                }
                for x, it in enumerate(self.iterations)
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmcf_apply(image_batch, point_batch, iterations: int = 1, fuse_weight: float = 0.5,
               eps: float = DEFAULT_EPS) -> CmcfResult:
    """Filter B image samples ((H*W), C) and B point samples (N, C) jointly.

    Output per sample is fuse_weight * filtered + (1 - fuse_weight) * original.
    """
    if iterations < 1:
        raise DomainError(f"CMCF needs at least one iteration, got {iterations}")
    originals_i = [np.asarray(s, dtype=np.float64) for s in image_batch]
    originals_p = [np.asarray(s, dtype=np.float64) for s in point_batch]
    if len(originals_i) != len(originals_p) or not originals_i:
        raise ShapeError("image and point batches must be non-empty and of equal size")
    channels = {s.shape[1] for s in originals_i + originals_p}
    if len(channels) != 1:
        raise ShapeError(f"samples disagree on channel count: {sorted(channels)}")

    cur_i, cur_p = originals_i, originals_p
    mom_i, mom_p, masks, log = [], [], [], []
    for x in range(iterations):
        norm_i = [instance_normalize(s, eps) for s in cur_i]
        norm_p = [instance_normalize(s, eps) for s in cur_p]
        vi = np.stack([second_moment(s) for s in norm_i])
        vp = np.stack([second_moment(s) for s in norm_p])
        cov = cross_modal_covariance(vi, vp, x)
        mask = build_mask(cov)
        mom_i.append(vi)
        mom_p.append(vp)
        masks.append(mask)
        log.append(CmcfIteration(cov.values, mask, masked_pairs(mask)))
        cur_i = [decorrelate_pairs(s, mask) for s in norm_i]
        cur_p = [decorrelate_pairs(s, mask) for s in norm_p]

    w = fuse_weight
    out_i = [w * f + (1.0 - w) * o for f, o in zip(cur_i, originals_i)]
    out_p = [w * f + (1.0 - w) * o for f, o in zip(cur_p, originals_p)]
    mom_i, mom_p = np.stack(mom_i), np.stack(mom_p)
    loss = filter_loss(mom_i, mom_p, np.stack(masks))
    return CmcfResult(out_i, out_p, loss, mom_i, mom_p, log)
