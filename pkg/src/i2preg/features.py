"""Cross-modal feature containers and Fourier positional augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

LEVELS = ("coarse", "fine")


def _frozen_f64(a, name: str, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureGrid:
    """Dense image features stored as (H, W, C); pixel (row, col) is implicit."""

    values: np.ndarray
    level: str = "coarse"

    def __post_init__(self) -> None:
        v = _frozen_f64(self.values, "grid values", 3)
        if min(v.shape) < 1:
            raise ShapeError(f"grid dimensions must be >= 1, got {v.shape}")
        if self.level not in LEVELS:
            raise DomainError(f"level must be one of {LEVELS}, got {self.level!r}")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        """Row-major (H*W, C) view."""
        return self.values.reshape(-1, self.channels)

    def pixel_coords(self) -> np.ndarray:
        """(H*W, 2) integer (row, col) lattice in the same order as ``flat``."""
        r, c = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([r.ravel(), c.ravel()], axis=1)

    def to_chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.values.transpose(2, 0, 1))

    @classmethod
    def from_chw(cls, chw: np.ndarray, level: str = "coarse") -> FeatureGrid:
        return cls(np.asarray(chw).transpose(1, 2, 0), level)

    def with_values(self, values: np.ndarray) -> FeatureGrid:
        return FeatureGrid(values, self.level)


@dataclass(frozen=True)
class PointFeatureSet:
    """N point descriptors (N, C) with their positions (N, 3) in metres."""

    descriptors: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        d = _frozen_f64(self.descriptors, "descriptors", 2)
        p = _frozen_f64(self.positions, "positions", 2)
        if p.shape[1] != 3:
            raise ShapeError(f"positions must be (N, 3), got {p.shape}")
        if d.shape[0] != p.shape[0]:
            raise ShapeError(f"{d.shape[0]} descriptors but {p.shape[0]} positions")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ShapeError("point sets need N >= 1 and C >= 1")
        object.__setattr__(self, "descriptors", d)
        object.__setattr__(self, "positions", p)

    @property
    def count(self) -> int:
        return self.descriptors.shape[0]

    @property
    def channels(self) -> int:
        return self.descriptors.shape[1]

    def with_descriptors(self, descriptors: np.ndarray) -> PointFeatureSet:
        return PointFeatureSet(descriptors, self.positions)


def fourier_embed(x, L: int) -> np.ndarray:
    """[x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)].

    Scalars give a vector of length 2L+1; arrays gain a trailing axis of that length.
    """
    if L < 1:
        raise DomainError(f"embedding length must be >= 1, got {L}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot embed non-finite coordinates")
    freqs = 2.0 ** np.arange(L)
    arg = x[..., None] * freqs
    out = np.empty(x.shape + (2 * L + 1,))
    out[..., 0] = x
    out[..., 1::2] = np.sin(arg)
    out[..., 2::2] = np.cos(arg)
    return out


def normalize_coords(coords: np.ndarray) -> np.ndarray:
    """Affinely map each coordinate axis onto [-1, 1]; constant axes map to 0."""
    c = np.asarray(coords, dtype=np.float64)
    lo = c.min(axis=0)
    span = c.max(axis=0) - lo
    out = np.zeros_like(c)
    nz = span > 0
    out[:, nz] = 2.0 * (c[:, nz] - lo[nz]) / span[nz] - 1.0
    return out


def embed_coords(coords: np.ndarray, L: int, normalize: bool = True) -> np.ndarray:
    """Concatenate per-axis embeddings: (n, D) -> (n, D*(2L+1))."""
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"coordinates must be (n, D), got {c.shape}")
    if normalize:
        c = normalize_coords(c)
    return fourier_embed(c, L).reshape(c.shape[0], -1)


def random_projection(in_dim: int, channels: int, seed: int) -> np.ndarray:
    """Seeded Gaussian map from embedding space to feature channels."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((in_dim, channels)) / np.sqrt(in_dim)


def add_positional(features, projection: np.ndarray, L: int, coords=None, normalize: bool = True):
    """Add projected Fourier embeddings of element positions to a grid or point set.

    Grids default to their (row, col) lattice and point sets to their 3D positions.
    """
    if isinstance(features, FeatureGrid):
        coords = features.pixel_coords() if coords is None else coords
        base = features.flat()
    elif isinstance(features, PointFeatureSet):
        coords = features.positions if coords is None else coords
        base = features.descriptors
    else:
        raise TypeError(f"expected FeatureGrid or PointFeatureSet, got {type(features).__name__}")
    emb = embed_coords(coords, L, normalize)
    if emb.shape[0] != base.shape[0]:
        raise ShapeError(f"{emb.shape[0]} coordinates for {base.shape[0]} feature elements")
    P = np.asarray(projection, dtype=np.float64)
    if P.shape != (emb.shape[1], base.shape[1]):
        raise ShapeError(
            f"projection must be {(emb.shape[1], base.shape[1])} to map embeddings onto channels, got {P.shape}"
        )
    out = base + emb @ P
    if isinstance(features, FeatureGrid):
        return features.with_values(out.reshape(features.values.shape))
    return features.with_descriptors(out)
