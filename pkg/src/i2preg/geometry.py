"""Camera intrinsics and rigid transforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; pixel (u, v) = (column, row), integer u at pixel centres."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise DomainError("image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Project camera-frame points (N, 3) to pixel coordinates (N, 2) as (u, v)."""
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[:, 2]
        return np.stack(
            [self.fx * p[:, 0] / z + self.cx, self.fy * p[:, 1] / z + self.cy], axis=1
        )

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        """Map pixels (N, 2) to normalized image-plane coordinates (N, 2)."""
        uv = np.asarray(uv, dtype=np.float64)
        return np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy], axis=1)

    def backproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Lift pixels (N, 2) with their depths (N,) to camera-frame points (N, 3)."""
        xy = self.normalize(uv)
        z = np.asarray(depth, dtype=np.float64)
        return np.stack([xy[:, 0] * z, xy[:, 1] * z, z], axis=1)

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64)

    @classmethod
    def from_array(cls, a: np.ndarray) -> CameraIntrinsics:
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.size != 6:
            raise ShapeError(f"intrinsics need 6 values, got {a.size}")
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), int(round(a[4])), int(round(a[5])))


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, with a second-order expansion near zero."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1.0 - np.cos(theta)) / theta**2 * W @ W


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (orthogonal polar factor with det +1)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians (atan2 form, accurate near zero)."""
    R = np.asarray(R, dtype=np.float64)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


@dataclass(frozen=True)
class RigidTransform:
    """x -> R x + t, mapping point-cloud coordinates into the camera frame (metres)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("transform contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise DomainError("rotation is not in SO(3) within 1e-6")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """self after other."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def as_vector(self) -> np.ndarray:
        """12 reals: row-major rotation followed by translation."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> RigidTransform:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != 12:
            raise ShapeError(f"pose vectors hold 12 reals, got {v.size}")
        return cls(v[:9].reshape(3, 3), v[9:])

    def rotation_error_deg(self, other: RigidTransform) -> float:
        return float(np.degrees(rotation_angle(self.rotation.T @ other.rotation)))

    def translation_error(self, other: RigidTransform) -> float:
        return float(np.linalg.norm(self.translation - other.translation))
