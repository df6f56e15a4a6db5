"""Synthetic shape generators, power-of-two padding, and dataset splits.

The generators provide small benchmarks whose classes are separable by shape:
a spherical shell, the faces of a box, a pair of anisotropic clusters, and a
two-part "lollipop" (stick + head) with per-point part labels.  All of them
have unique principal axes at zero noise except the sphere shell, which is
kept on purpose as a degenerate stressor for the PCA-based machinery.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import EmptySplit
from .geometry import PointCloud
from .rng import make_rng

SHAPE_KINDS = ("s_shape", "sphere_shell", "cube_faces", "lollipop",
               "two_cluster", "random_uniform")

#: Flat 8-point S layout (z = 0) used as a deterministic regression fixture.
S_SHAPE_8 = np.array([
    (0.45, 0.95, 0.0),
    (-0.05, 1.00, 0.0),
    (-0.45, 0.65, 0.0),
    (-0.05, 0.30, 0.0),
    (0.40, 0.00, 0.0),
    (0.45, -0.45, 0.0),
    (0.05, -0.80, 0.0),
    (-0.45, -0.70, 0.0),
])


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    count: int
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; options: {SHAPE_KINDS}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.noise < 0.0:
            raise ValueError("noise must be >= 0")


@dataclass
class Record:
    """One dataset entry: a cloud, an optional class label, and provenance."""

    cloud: PointCloud
    label: Optional[int] = None
    provenance: dict = field(default_factory=dict)


@dataclass
class Splits:
    train: List[Record]
    val: List[Record]
    test: List[Record]


def _s_curve(count: int) -> np.ndarray:
    # Two stacked semicircular arcs traced top-to-bottom.
    t = np.linspace(0.0, 1.0, count)
    pts = np.empty((count, 3))
    upper = t < 0.5
    ang_u = np.pi * (0.5 + 2.0 * t[upper])          # from top of the upper arc
    pts[upper, 0] = 0.5 * np.cos(ang_u)
    pts[upper, 1] = 0.5 + 0.5 * np.sin(ang_u)
    ang_l = np.pi * (0.5 - 2.0 * (t[~upper] - 0.5))  # reversed lower arc
    pts[~upper, 0] = -0.5 * np.cos(ang_l)
    pts[~upper, 1] = -0.5 + 0.5 * np.sin(ang_l)
    pts[:, 2] = 0.0
    return pts


def _sphere_surface(rng: np.random.Generator, count: int) -> np.ndarray:
    d = rng.normal(size=(count, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _cube_faces(rng: np.random.Generator, count: int) -> np.ndarray:
    # Box faces with distinct half-extents so the principal axes are unique.
    ext = np.array([1.0, 0.7, 0.45])
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    areas = np.repeat(areas, 2)
    face = rng.choice(6, size=count, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(count, 2))
    pts = np.empty((count, 3))
    for i in range(count):
        axis = face[i] // 2
        sign = 1.0 if face[i] % 2 == 0 else -1.0
        others = [j for j in range(3) if j != axis]
        pts[i, axis] = sign * ext[axis]
        pts[i, others[0]] = uv[i, 0] * ext[others[0]]
        pts[i, others[1]] = uv[i, 1] * ext[others[1]]
    return pts


def _two_cluster(rng: np.random.Generator, count: int) -> np.ndarray:
    radii = np.array([0.30, 0.20, 0.12])
    centers = np.array([(0.7, 0.1, 0.0), (-0.7, -0.1, 0.0)])
    half = count // 2
    which = np.concatenate([np.zeros(half, int), np.ones(count - half, int)])
    return centers[which] + rng.normal(size=(count, 3)) * radii


def _lollipop(rng: np.random.Generator, count: int):
    # Stick along z plus an offset spherical head; labels 0 = stick, 1 = head.
    n_head = count // 2
    n_stick = count - n_head
    head_center = np.array([0.15, 0.0, 0.55])
    head = head_center + 0.32 * _sphere_surface(rng, n_head)
    z = rng.uniform(-1.0, 0.3, size=n_stick)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n_stick)
    stick = np.stack([0.05 * np.cos(phi), 0.05 * np.sin(phi), z], axis=1)
    pts = np.vstack([stick, head])
    labels = np.concatenate([np.zeros(n_stick, int), np.ones(n_head, int)])
    return pts, labels


def generate(spec: ShapeSpec) -> PointCloud:
    """Deterministic synthetic cloud for the given spec."""
    rng = make_rng(spec.seed)
    labels = None
    if spec.kind == "s_shape":
        pts = S_SHAPE_8.copy() if spec.count == 8 else _s_curve(spec.count)
    elif spec.kind == "sphere_shell":
        pts = _sphere_surface(rng, spec.count)
    elif spec.kind == "cube_faces":
        pts = _cube_faces(rng, spec.count)
    elif spec.kind == "two_cluster":
        pts = _two_cluster(rng, spec.count)
    elif spec.kind == "lollipop":
        pts, labels = _lollipop(rng, spec.count)
    elif spec.kind == "random_uniform":
        pts = rng.uniform(-1.0, 1.0, size=(spec.count, 3))
    else:  # pragma: no cover - guarded by ShapeSpec
        raise ValueError(spec.kind)
    if spec.noise > 0.0:
        pts = pts + rng.normal(size=pts.shape) * spec.noise
    return PointCloud(pts, labels=labels)


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def pad_to_pow2(cloud: PointCloud, seed: int) -> PointCloud:
    """Duplicate seeded-random points until the count is a power of two.

    Duplicates carry their source's label and are flagged so that
    segmentation metrics can exclude them.  Power-of-two inputs pass through
    unchanged.
    """
    n = len(cloud)
    target = next_pow2(n)
    if target == n:
        return cloud
    extra = make_rng(seed).integers(0, n, size=target - n)
    points = np.vstack([cloud.points, cloud.points[extra]])
    labels = None
    if cloud.labels is not None:
        labels = np.concatenate([cloud.labels, cloud.labels[extra]])
    base_dup = (np.zeros(n, bool) if cloud.duplicated is None
                else cloud.duplicated.copy())
    duplicated = np.concatenate([base_dup, np.ones(target - n, bool)])
    return PointCloud(points, labels=labels, duplicated=duplicated)


def split(records: List[Record], fractions, seed: int) -> Splits:
    """Seeded disjoint partition into train/val/test, stratified by label."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    by_class: dict = {}
    for i, rec in enumerate(records):
        by_class.setdefault(rec.label, []).append(i)

    buckets: List[List[Record]] = [[], [], []]
    for label in sorted(by_class, key=lambda x: (x is None, x)):
        idx = np.array(by_class[label])
        idx = idx[make_rng(seed, 0 if label is None else int(label) + 1)
                  .permutation(idx.size)]
        # Largest-remainder rounding keeps per-class counts within 1 of exact.
        exact = np.array(fractions) * idx.size
        counts = np.floor(exact).astype(int)
        rem = np.argsort(-(exact - counts), kind="stable")
        for j in rem[:idx.size - counts.sum()]:
            counts[j] += 1
        start = 0
        for b in range(3):
            for i in idx[start:start + counts[b]]:
                buckets[b].append(records[i])
            start += counts[b]

    for frac, bucket, name in zip(fractions, buckets, ("train", "val", "test")):
        if frac > 0 and records and not bucket:
            raise EmptySplit(f"{name} fraction {frac} received no records")
    return Splits(*buckets)


def make_classification_benchmark(per_class: int = 300, n_points: int = 128,
                                  noise: float = 0.02, seed: int = 0) -> List[Record]:
    """Three-class benchmark: sphere shell / box faces / two clusters."""
    kinds = ("sphere_shell", "cube_faces", "two_cluster")
    records = []
    for label, kind in enumerate(kinds):
        for i in range(per_class):
            spec = ShapeSpec(kind, n_points, noise=noise, seed=seed * 1000003 + label * 7919 + i)
            records.append(Record(generate(spec), label=label,
                                  provenance={"shape": kind, "index": i}))
    return records


def make_segmentation_benchmark(count: int = 450, n_points: int = 128,
                                noise: float = 0.01, seed: int = 0) -> List[Record]:
    """Two-part lollipop clouds with per-point labels."""
    records = []
    for i in range(count):
        spec = ShapeSpec("lollipop", n_points, noise=noise, seed=seed * 1000003 + i)
        records.append(Record(generate(spec), label=0,
                              provenance={"shape": "lollipop", "index": i}))
    return records
