"""Intra-modal channel enhancement for image (ICE) and point (PCE) features.

ICE runs three attention gates over a (C, H, W) tensor: one on the tensor as is,
one after a 90 degree rotation in the C-H plane (so pooling runs over H and the
gate sees a C x W map) and one after a rotation in the C-W plane. Gate outputs
are rotated back and averaged. PCE is single-head self-attention over points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, ShapeError

# Rotation plane for each ICE branch; None leaves the tensor as is.
_BRANCH_AXES = (None, (0, 1), (0, 2))


def go_pool(t: np.ndarray) -> np.ndarray:
    """Stack the max and the mean over the leading axis: (d0, ...) -> (2, ...)."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim < 1 or t.shape[0] < 1 or t.size == 0:
        raise ShapeError("go_pool needs a non-empty leading dimension")
    if not np.all(np.isfinite(t)):
        raise DomainError("go_pool input contains non-finite values")
    return np.stack([t.max(axis=0), t.mean(axis=0)])


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def conv2d_same(planes: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation of (P, H, W) planes with a (P, k, k) kernel, summed over P."""
    k = kernel.shape[-1]
    r = k // 2
    padded = np.pad(planes, ((0, 0), (r, r), (r, r)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))  # (P, H, W, k, k)
    return np.einsum("phwij,pij->hw", windows, kernel)


@dataclass(frozen=True)
class IceParams:
    """Per-branch 2->1 kernels (3, 2, k, k) and affine normalization (scale, shift)."""

    kernels: np.ndarray
    norm_scale: np.ndarray
    norm_shift: np.ndarray

    def __post_init__(self) -> None:
        kern = np.array(self.kernels, dtype=np.float64)
        if kern.ndim != 4 or kern.shape[:2] != (3, 2) or kern.shape[2] != kern.shape[3]:
            raise ShapeError(f"kernels must be (3, 2, k, k), got {kern.shape}")
        if kern.shape[2] % 2 == 0:
            raise DomainError(f"kernel size must be odd, got {kern.shape[2]}")
        scale = np.array(self.norm_scale, dtype=np.float64).reshape(3)
        shift = np.array(self.norm_shift, dtype=np.float64).reshape(3)
        if not all(np.all(np.isfinite(a)) for a in (kern, scale, shift)):
            raise DomainError("ICE parameters must be finite")
        object.__setattr__(self, "kernels", kern)
        object.__setattr__(self, "norm_scale", scale)
        object.__setattr__(self, "norm_shift", shift)

    @property
    def k(self) -> int:
        return self.kernels.shape[2]

    @classmethod
    def zeros(cls, k: int = 7) -> IceParams:
        return cls(np.zeros((3, 2, k, k)), np.ones(3), np.zeros(3))

    @classmethod
    def random(cls, seed: int, k: int = 7, std: float = 0.1) -> IceParams:
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, (3, 2, k, k)), np.ones(3), np.zeros(3))


def attention_gate(x: np.ndarray, kernel: np.ndarray, scale: float, shift: float) -> np.ndarray:
    """x * sigmoid(BN(conv(GO-Pool(x)))) with the gate broadcast over the leading axis."""
    logits = scale * conv2d_same(go_pool(x), kernel) + shift
    return x * sigmoid(logits)[None]


def ice_branch(x: np.ndarray, params: IceParams, branch: int) -> np.ndarray:
    axes = _BRANCH_AXES[branch]
    kern, s, b = params.kernels[branch], params.norm_scale[branch], params.norm_shift[branch]
    if axes is None:
        return attention_gate(x, kern, s, b)
    rotated = np.rot90(x, 1, axes)
    return np.rot90(attention_gate(rotated, kern, s, b), -1, axes)


def ice_forward(x_chw: np.ndarray, params: IceParams) -> np.ndarray:
    """Average of the three gated branches; output shape equals input shape."""
    x = np.asarray(x_chw, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"ICE expects a (C, H, W) tensor, got {x.shape}")
    b0, b1, b2 = (ice_branch(x, params, y) for y in range(3))
    # Offsets from the first branch keep the mean exact when all branches agree.
    return b0 + ((b1 - b0) + (b2 - b0)) / 3.0


@dataclass(frozen=True)
class PceParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    scale: float | None = None  # None -> C ** -0.5

    def __post_init__(self) -> None:
        mats = [np.array(m, dtype=np.float64) for m in (self.w_q, self.w_k, self.w_v)]
        c = mats[0].shape[0]
        if any(m.shape != (c, c) for m in mats):
            raise ShapeError("W_Q, W_K, W_V must be square and share one size")
        if not all(np.all(np.isfinite(m)) for m in mats):
            raise DomainError("PCE projections must be finite")
        scale = c ** -0.5 if self.scale is None else float(self.scale)
        if not scale > 0:
            raise DomainError(f"PCE scale must be positive, got {scale}")
        for name, m in zip(("w_q", "w_k", "w_v"), mats):
            object.__setattr__(self, name, m)
        object.__setattr__(self, "scale", scale)

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def identity(cls, channels: int, scale: float | None = None) -> PceParams:
        eye = np.eye(channels)
        return cls(eye, eye, eye, scale)

    @classmethod
    def random(cls, channels: int, seed: int, std: float | None = None) -> PceParams:
        """Gaussian query/key maps; the value map is the identity so values stay descriptors."""
        rng = np.random.default_rng(seed)
        std = channels ** -0.5 if std is None else std
        return cls(rng.normal(0.0, std, (channels, channels)),
                   rng.normal(0.0, std, (channels, channels)), np.eye(channels))


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pce_attention(f_p: np.ndarray, params: PceParams) -> np.ndarray:
    f = np.asarray(f_p, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != params.channels:
        raise ShapeError(f"features {f.shape} do not match {params.channels}-channel projections")
    q = f @ params.w_q
    k = f @ params.w_k
    return softmax_rows(q @ k.T * params.scale / np.sqrt(f.shape[1]))


def pce_forward(f_p: np.ndarray, params: PceParams, return_attention: bool = False):
    """A V with A = softmax(Q K^T S / sqrt(C)) over points (N x N)."""
    A = pce_attention(f_p, params)
    out = A @ (np.asarray(f_p, dtype=np.float64) @ params.w_v)
    return (out, A) if return_attention else out


@dataclass(frozen=True)
class FusionParams:
    """Residual mixing: image alpha*F + beta*F', points lam*F + mu*F'."""

    alpha: float = 1.0
    beta: float = 0.5
    lam: float = 1.0
    mu: float = 0.5

    def __post_init__(self) -> None:
        if not np.all(np.isfinite([self.alpha, self.beta, self.lam, self.mu])):
            raise DomainError("fusion coefficients must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.lam, self.mu])


def residual_fuse(orig: np.ndarray, enhanced: np.ndarray, params: FusionParams,
                  modality: str = "image") -> np.ndarray:
    orig = np.asarray(orig, dtype=np.float64)
    enhanced = np.asarray(enhanced, dtype=np.float64)
    if orig.shape != enhanced.shape:
        raise ShapeError(f"cannot fuse {orig.shape} with {enhanced.shape}")
    if modality == "image":
        a, b = params.alpha, params.beta
    elif modality == "points":
        a, b = params.lam, params.mu
    else:
        raise ValueError(f"modality must be 'image' or 'points', got {modality!r}")
    return a * orig + b * enhanced
