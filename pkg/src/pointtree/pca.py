"""Deterministic 3-component PCA and the pre-alignment normalizations on it.

The decomposition of a centered cloud X is X = U diag(S) V^T with V the
orthonormal eigenvectors of X^T X and S_k = sqrt(lambda_k).  Eigenvectors come
from a cyclic Jacobi sweep on the 3x3 covariance; an explicit sign convention
(below) makes V, and therefore everything built on it, a pure function of the
input bits.

Sign convention per direction v: orient so that sum((X v)^3) >= 0; if that
statistic's magnitude is below 1e-9, orient so the largest-|.| component of v
is positive; if that is tied, make the first nonzero component positive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCloud, RankDeficient
from .geometry import PointCloud

#: Relative rank threshold: S_3 <= EPS_RANK * S_1 counts as rank-deficient.
EPS_RANK = 1e-9

_SIGN_STAT_TOL = 1e-9
_JACOBI_SWEEPS = 30
_JACOBI_OFF_TOL = 1e-14


@dataclass(frozen=True)
class PcaDecomposition:
    """Scores U (n x 3), singular values (non-increasing), direction columns V."""

    scores: np.ndarray
    singular_values: np.ndarray
    directions: np.ndarray
    rank_deficient: bool

    def reconstruct(self) -> np.ndarray:
        """U diag(S) V^T, equal to the centered input up to rounding."""
        return (self.scores * self.singular_values) @ self.directions.T


def jacobi_eigh3(matrix: np.ndarray):
    """Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted in
    non-increasing order and eigenvectors as matching columns.  Convergence is
    capped at 30 sweeps with an off-diagonal tolerance relative to the matrix
    scale; for 3x3 symmetric input that cap is never reached in practice.
    """
    a = [[float(matrix[i, j]) for j in range(3)] for i in range(3)]
    v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    scale = max(abs(a[i][j]) for i in range(3) for j in range(3))
    tol = _JACOBI_OFF_TOL * max(scale, np.finfo(float).tiny)

    for _ in range(_JACOBI_SWEEPS):
        off = max(abs(a[0][1]), abs(a[0][2]), abs(a[1][2]))
        if off <= tol:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p][q]
            if abs(apq) <= tol:
                continue
            theta = (a[q][q] - a[p][p]) / (2.0 * apq)
            t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
            if theta < 0.0:
                t = -t
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            app, aqq = a[p][p], a[q][q]
            a[p][p] = c * c * app - 2.0 * s * c * apq + s * s * aqq
            a[q][q] = s * s * app + 2.0 * s * c * apq + c * c * aqq
            a[p][q] = a[q][p] = 0.0
            r = 3 - p - q  # the remaining index
            arp, arq = a[r][p], a[r][q]
            a[r][p] = a[p][r] = c * arp - s * arq
            a[r][q] = a[q][r] = s * arp + c * arq
            for i in range(3):
                vip, viq = v[i][p], v[i][q]
                v[i][p] = c * vip - s * viq
                v[i][q] = s * vip + c * viq

    eigvals = np.array([a[0][0], a[1][1], a[2][2]])
    eigvecs = np.array(v)
    order = list(np.argsort(-eigvals, kind="stable"))
    # Eigenvalues equal up to rounding noise are genuinely unordered; break
    # those ties by original index so near-isotropic inputs sort stably.
    tie = 1e-12 * max(np.max(np.abs(eigvals)), np.finfo(float).tiny)
    for _ in range(2):
        for i in range(2):
            if (eigvals[order[i]] - eigvals[order[i + 1]] <= tie
                    and order[i] > order[i + 1]):
                order[i], order[i + 1] = order[i + 1], order[i]
    order = np.array(order)
    return eigvals[order], eigvecs[:, order]


def _orient_column(v: np.ndarray, projections: np.ndarray) -> np.ndarray:
    """Apply the sign convention to one direction column."""
    stat = float(np.sum(projections ** 3))
    if stat > _SIGN_STAT_TOL:
        return v
    if stat < -_SIGN_STAT_TOL:
        return -v
    mags = np.abs(v)
    k = int(np.argmax(mags))
    ties = np.flatnonzero(mags == mags[k])
    if ties.size > 1:
        nz = np.flatnonzero(v != 0.0)
        if nz.size == 0:
            return v
        k = int(nz[0])
    return v if v[k] > 0.0 else -v


def pca(cloud: PointCloud) -> PcaDecomposition:
    """Deterministic PCA of the centered cloud."""
    x = cloud.points - cloud.points.mean(axis=0)
    scale = float(np.max(np.abs(x)))
    if scale == 0.0:
        raise DegenerateCloud("covariance is zero: all points coincide")
    cov = x.T @ x
    eigvals, eigvecs = jacobi_eigh3(cov)
    eigvals = np.maximum(eigvals, 0.0)
    sigma = np.sqrt(eigvals)

    directions = np.empty((3, 3))
    scores = np.zeros((len(cloud), 3))
    for k in range(3):
        v = _orient_column(eigvecs[:, k].copy(), x @ eigvecs[:, k])
        directions[:, k] = v
        if sigma[k] > 0.0:
            scores[:, k] = (x @ v) / sigma[k]

    deficient = len(cloud) < 3 or sigma[2] <= EPS_RANK * sigma[0]
    return PcaDecomposition(scores, sigma, directions, deficient)


def choose_division_plane(cloud: PointCloud) -> np.ndarray:
    """Unit normal of the dividing plane: the first principal direction."""
    if len(cloud) < 2:
        raise DegenerateCloud("need at least two points to choose a plane")
    return pca(cloud).directions[:, 0].copy()


def prealign(cloud: PointCloud, planar_fallback: bool = False) -> PointCloud:
    """Replace the centered cloud by its PCA scores U.

    U is what is left after dividing out the rotation V and the per-axis
    scalings S, so clouds that differ by an invertible linear map land on
    (similarity images of) the same U.  Flat clouds have S_3 ~ 0 and no
    well-defined third score axis; they raise RankDeficient unless
    ``planar_fallback`` substitutes S_3 <- EPS_RANK * S_1 so they still
    normalize.
    """
    dec = pca(cloud)
    sigma = dec.singular_values
    if sigma[2] <= EPS_RANK * sigma[0]:
        if not planar_fallback:
            raise RankDeficient(
                f"S_3 / S_1 = {sigma[2] / sigma[0]:.3e} <= {EPS_RANK:.0e}")
        x = cloud.points - cloud.points.mean(axis=0)
        clamped = np.maximum(sigma, EPS_RANK * sigma[0])
        return cloud.with_points((x @ dec.directions) / clamped)
    return cloud.with_points(dec.scores)


def is_signed_permutation(matrix: np.ndarray, tol: float = 1e-6) -> bool:
    """True iff the matrix is a permutation with +-1 entries, within tol."""
    mags = np.abs(matrix)
    cols = np.argmax(mags, axis=0)
    if sorted(cols.tolist()) != [0, 1, 2]:
        return False
    for j in range(3):
        if abs(mags[cols[j], j] - 1.0) > tol:
            return False
        if np.sum(mags[:, j]) - mags[cols[j], j] > tol:
            return False
    return True


@dataclass(frozen=True)
class IterativePrealignResult:
    cloud: PointCloud
    converged: bool
    iterations: int


def iterative_prealign(cloud: PointCloud, max_iter: int = 20,
                       planar_fallback: bool = False) -> IterativePrealignResult:
    """Alternate PCA alignment with per-axis mean-|coordinate| scaling.

    Each round replaces the cloud by its scores U and then divides every axis
    by the mean absolute coordinate on that axis.  The loop stops early once
    PCA proposes axes that are already a signed permutation of x, y, z.
    Non-convergence within ``max_iter`` is not an error; the last iterate is
    returned with ``converged=False``.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    current = cloud
    for iteration in range(1, max_iter + 1):
        dec = pca(current)
        if is_signed_permutation(dec.directions):
            return IterativePrealignResult(current, True, iteration)
        aligned = prealign(current, planar_fallback=planar_fallback).points
        means = np.mean(np.abs(aligned), axis=0)
        if np.any(means == 0.0):
            raise RankDeficient("an axis collapsed to zero during scaling")
        current = current.with_points(aligned / means)
    return IterativePrealignResult(current, False, max_iter)
