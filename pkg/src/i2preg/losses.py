"""Circle loss, total objective and a central-difference gradient checker."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class CircleLossParams:
    gamma: float = 24.0
    delta_p: float = 0.1
    delta_n: float = 1.4

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if not self.delta_n > self.delta_p:
            warnings.warn("negative margin does not exceed the positive margin", stacklevel=2)


def _exponents(pos, neg, p: CircleLossParams):
    d_pos = np.asarray(pos, dtype=np.float64).reshape(-1)
    d_neg = np.asarray(neg, dtype=np.float64).reshape(-1)
    if d_pos.size == 0 or d_neg.size == 0:
        raise ShapeError("circle loss needs at least one positive and one negative distance")
    if not (np.all(np.isfinite(d_pos)) and np.all(np.isfinite(d_neg))):
        raise DomainError("distances must be finite")
    u = d_pos - p.delta_p
    v = p.delta_n - d_neg
    # Exponent is gamma * weight * margin^2 with the weight clamped at zero.
    a = p.gamma * np.maximum(u, 0.0) * u * u
    b = p.gamma * np.maximum(v, 0.0) * v * v
    return u, v, a, b


def circle_loss(pos_dists, neg_dists, p: CircleLossParams = CircleLossParams()) -> float:
    """(1/gamma) log(1 + sum_j exp(a_j) * sum_k exp(b_k)), evaluated as a softplus of log-sums."""
    _, _, a, b = _exponents(pos_dists, neg_dists, p)
    z = logsumexp(a) + logsumexp(b)
    return float(np.logaddexp(0.0, z) / p.gamma)


def circle_loss_grad(pos_dists, neg_dists, p: CircleLossParams = CircleLossParams(),
                     detach_weights: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Gradient with respect to the positive and negative distances.

    With ``detach_weights`` the clamped weights are held constant, which gives the
    reweighted training direction rather than the derivative of ``circle_loss``.
    """
    u, v, a, b = _exponents(pos_dists, neg_dists, p)
    la, lb = logsumexp(a), logsumexp(b)
    outer = 1.0 / (1.0 + np.exp(-(la + lb))) / p.gamma
    power = 2.0 if detach_weights else 3.0
    da = power * p.gamma * np.maximum(u, 0.0) * u
    db = -power * p.gamma * np.maximum(v, 0.0) * v
    return outer * np.exp(a - la) * da, outer * np.exp(b - lb) * db


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            w = getattr(self, name)
            if not (np.isfinite(w) and w >= 0):
                raise DomainError(f"{name} must be finite and nonnegative, got {w}")


def total_loss(l_filter: float, l_coarse: float, l_fine: float, w: LossWeights = LossWeights()) -> float:
    terms = (l_filter, l_coarse, l_fine)
    if not all(np.isfinite(t) for t in terms):
        raise DomainError("loss terms must be finite")
    return w.lambda1 * l_filter + w.lambda2 * l_coarse + w.lambda3 * l_fine


@dataclass
class GradcheckReport:
    max_error: float
    worst: list[dict] = field(default_factory=list)

    def text(self) -> str:
        return json.dumps({"max_error": self.max_error, "worst": self.worst}, indent=2, sort_keys=True) + "\n"


def finite_diff_gradcheck(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                          x0, h: float = 1e-6, top: int = 5) -> GradcheckReport:
    """Compare central differences with an analytic gradient, error |num - g| / max(1, |g|)."""
    if not h > 0:
        raise DomainError(f"step must be positive, got {h}")
    x = np.array(x0, dtype=np.float64)
    g = np.asarray(grad(x), dtype=np.float64)
    if g.shape != x.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match {x.shape}")
    flat, gflat = x.reshape(-1), g.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = f(xp.reshape(x.shape)), f(xm.reshape(x.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"function is not finite near coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * h)
    if not np.all(np.isfinite(gflat)):
        raise DomainError("analytic gradient contains non-finite values")
    err = np.abs(numeric - gflat) / np.maximum(1.0, np.abs(gflat))
    order = np.argsort(-err, kind="stable")[:top]
    worst = [{"index": int(i), "numeric": float(numeric[i]), "analytic": float(gflat[i]),
              "error": float(err[i])} for i in order]
    return GradcheckReport(float(err.max()) if err.size else 0.0, worst)
