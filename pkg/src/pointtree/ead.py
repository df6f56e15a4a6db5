"""Expected Angle Difference between two index-corresponded point clouds.

For a uniformly random ordered triple of distinct indices (a, b, c), compare
the vertex angle at point a toward b and c in both clouds and average the
absolute difference.  The value is 0 exactly when the clouds differ by a
similarity transformation, and grows with deformation.  Small clouds are
evaluated exactly over all ordered triples; large ones by Monte Carlo with a
reported standard error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTriple, TooManyDegenerateTriples
from .geometry import PointCloud
from .rng import make_rng

#: Largest cloud ead_exact will enumerate (n * (n-1) * (n-2) ordered triples).
EXACT_CAP = 64

#: Two points closer than this make a vertex angle undefined.
COINCIDENT_TOL = 1e-12


@dataclass(frozen=True)
class EadEstimate:
    value: float
    stderr: float
    samples: int
    mode: str  # "exact" or "monte_carlo"
    degenerate_resampled: int = 0


def angle_diff(theta: float, theta_prime: float) -> float:
    """Absolute difference of two vertex angles, both in [0, pi]."""
    if not (-1e-12 <= theta <= np.pi + 1e-12 and -1e-12 <= theta_prime <= np.pi + 1e-12):
        raise ValueError("angles must lie in [0, pi]")
    return abs(theta - theta_prime)


def _vertex_angles(points: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Angles at points[a] toward points[b] and points[c], plus degeneracy mask."""
    u = points[b] - points[a]
    v = points[c] - points[a]
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    degenerate = (nu < COINCIDENT_TOL) | (nv < COINCIDENT_TOL)
    cross = np.cross(u, v)
    angles = np.arctan2(np.linalg.norm(cross, axis=1), np.sum(u * v, axis=1))
    return angles, degenerate


def _check_pair(p: PointCloud, p_prime: PointCloud) -> int:
    if len(p) != len(p_prime):
        raise ValueError(f"clouds must correspond by index: {len(p)} vs {len(p_prime)}")
    return len(p)


def ead_exact(p: PointCloud, p_prime: PointCloud, cap: int = EXACT_CAP) -> EadEstimate:
    """Mean angle difference over every ordered triple of distinct indices."""
    n = _check_pair(p, p_prime)
    if n > cap:
        raise ValueError(f"cloud size {n} exceeds exact-mode cap {cap}; use ead_mc")
    if n < 3:
        raise ValueError("need at least three points to form a triple")
    idx = np.arange(n)
    a, b, c = (g.ravel() for g in np.meshgrid(idx, idx, idx, indexing="ij"))
    keep = (a != b) & (a != c) & (b != c)
    a, b, c = a[keep], b[keep], c[keep]

    angles, degenerate = _vertex_angles(p.points, a, b, c)
    angles_prime, degenerate_prime = _vertex_angles(p_prime.points, a, b, c)
    if np.any(degenerate) or np.any(degenerate_prime):
        bad = int(np.argmax(degenerate | degenerate_prime))
        raise DegenerateTriple(
            f"vertex {a[bad]} coincides with a ray endpoint ({b[bad]} or {c[bad]})")
    diffs = np.abs(angles - angles_prime)
    return EadEstimate(float(diffs.mean()), 0.0, int(diffs.size), "exact")


def ead_mc(p: PointCloud, p_prime: PointCloud, samples: int, seed: int) -> EadEstimate:
    """Monte-Carlo estimate over uniformly drawn distinct-index triples.

    Triples that hit a coincident vertex/endpoint pair are resampled and
    counted; the total attempt budget is 100 * samples.
    """
    n = _check_pair(p, p_prime)
    if n < 3:
        raise ValueError("need at least three points to form a triple")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = make_rng(seed)

    diffs = np.empty(samples)
    filled = 0
    degenerate_count = 0
    attempts = 0
    budget = 100 * samples
    while filled < samples:
        batch = max(1024, 2 * (samples - filled))
        a, b, c = rng.integers(0, n, size=(3, batch))
        keep = (a != b) & (a != c) & (b != c)
        a, b, c = a[keep], b[keep], c[keep]
        if a.size == 0:
            continue
        attempts += a.size
        angles, degenerate = _vertex_angles(p.points, a, b, c)
        angles_prime, degenerate_prime = _vertex_angles(p_prime.points, a, b, c)
        bad = degenerate | degenerate_prime
        degenerate_count += int(bad.sum())
        good = np.abs(angles - angles_prime)[~bad]
        take = min(samples - filled, good.size)
        diffs[filled:filled + take] = good[:take]
        filled += take
        if attempts > budget:
            raise TooManyDegenerateTriples(
                f"{degenerate_count} degenerate triples in {attempts} attempts")
    stderr = float(np.std(diffs, ddof=1) / np.sqrt(samples)) if samples > 1 else 0.0
    return EadEstimate(float(diffs.mean()), stderr, samples, "monte_carlo",
                       degenerate_resampled=degenerate_count)
