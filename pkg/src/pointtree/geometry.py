"""Point-cloud value types, canonical preprocessing, and transform application.

A :class:`PointCloud` is an ordered list of 3-D points.  The order is only a
stable identity used for tie-breaking downstream; no public result may depend
on it otherwise.  Per-point labels (for segmentation) and padding flags travel
with the points so that transformations can never desynchronize them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import DegenerateCloud, NearInfiniteProjection

#: Smallest admissible |homogeneous weight| on the cloud a projective
#: transform was sampled against (clouds are unitized at that point).
EPS_W = 1e-3


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """n x 3 coordinate set with optional per-point labels and padding flags."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    duplicated: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _readonly(pts))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (pts.shape[0],):
                raise ValueError("labels must be one integer per point")
            object.__setattr__(self, "labels", _readonly(lab))
        if self.duplicated is not None:
            dup = np.asarray(self.duplicated, dtype=bool)
            if dup.shape != (pts.shape[0],):
                raise ValueError("duplicated flags must be one bool per point")
            object.__setattr__(self, "duplicated", _readonly(dup))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Same labels/flags attached to new coordinates."""
        return PointCloud(points, labels=self.labels, duplicated=self.duplicated)


@dataclass(frozen=True)
class AffineTransform:
    """p -> linear @ p + shift.  The sampled distributions use zero shift."""

    linear: np.ndarray
    shift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    provenance: Optional[dict] = None

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64)
        sh = np.asarray(self.shift, dtype=np.float64)
        if lin.shape != (3, 3):
            raise ValueError(f"linear part must be 3x3, got {lin.shape}")
        if sh.shape != (3,):
            raise ValueError(f"shift must be a 3-vector, got {sh.shape}")
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(sh))):
            raise ValueError("transform entries must be finite")
        object.__setattr__(self, "linear", _readonly(lin))
        object.__setattr__(self, "shift", _readonly(sh))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3))

    def is_similarity(self, tol: float = 1e-9) -> bool:
        """True iff linear.T @ linear == s * I for some scalar s > 0."""
        g = self.linear.T @ self.linear
        s = np.trace(g) / 3.0
        if s <= 0.0:
            return False
        return bool(np.max(np.abs(g - s * np.eye(3))) <= tol * max(1.0, s))

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """Transform equal to applying ``inner`` first, then ``self``."""
        return AffineTransform(self.linear @ inner.linear,
                               self.linear @ inner.shift + self.shift)


@dataclass(frozen=True)
class ProjectiveTransform:
    """Homogeneous map p -> dehomogenize(matrix @ (p, 1))."""

    matrix: np.ndarray
    eps_w: float = EPS_W
    provenance: Optional[dict] = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transform entries must be finite")
        object.__setattr__(self, "matrix", _readonly(m))

    def weights(self, points: np.ndarray) -> np.ndarray:
        """Homogeneous weight w(p) for each point."""
        return points @ self.matrix[3, :3] + self.matrix[3, 3]


Transform = Union[AffineTransform, ProjectiveTransform]


def center(cloud: PointCloud) -> PointCloud:
    """Shift the centroid to the origin; point order is preserved."""
    return cloud.with_points(cloud.points - cloud.centroid())


def unitize(cloud: PointCloud) -> PointCloud:
    """Center, then scale so the farthest point sits on the unit sphere."""
    centered = cloud.points - cloud.centroid()
    radius = float(np.max(np.linalg.norm(centered, axis=1)))
    if not radius > 0.0:
        raise DegenerateCloud("all points coincide; no scale to normalize")
    return cloud.with_points(centered / radius)


def apply(transform: Transform, cloud: PointCloud) -> PointCloud:
    """Apply an affine or projective transform; labels ride along unchanged."""
    if isinstance(transform, AffineTransform):
        pts = cloud.points @ transform.linear.T + transform.shift
        return cloud.with_points(pts)
    if isinstance(transform, ProjectiveTransform):
        h = np.hstack([cloud.points, np.ones((cloud.n, 1))]) @ transform.matrix.T
        w = h[:, 3]
        if np.min(np.abs(w)) < transform.eps_w:
            raise NearInfiniteProjection(
                f"min |w(p)| = {np.min(np.abs(w)):.3e} < {transform.eps_w:.3e}")
        return cloud.with_points(h[:, :3] / w[:, None])
    raise TypeError(f"unsupported transform type: {type(transform).__name__}")
