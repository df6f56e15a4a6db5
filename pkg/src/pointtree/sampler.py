"""Random transformation distributions and transformed-dataset generation.

Three deformation families are provided: plain random affines with i.i.d.
entries uniform on (-1/sqrt(3), 1/sqrt(3)); "aggressive" affines picked as the
highest-deformation candidate out of a large sample; and random projective
maps built from four points in [-2, 2]^3 composed with a fresh affine.
Similarity and identity distributions exist for robustness experiments and
test hooks.  Every sampled transform records its provenance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import geometry
from .data import Record
from .ead import ead_mc
from .errors import SamplerStuck
from .geometry import EPS_W, AffineTransform, PointCloud, ProjectiveTransform
from .rng import make_rng

AFFINE_ENTRY_BOUND = 1.0 / np.sqrt(3.0)
MIN_ABS_DET = 1e-6
_MAX_ATTEMPTS = 1000

DISTRIBUTION_KINDS = ("affine", "affine_aggressive", "projective",
                      "similarity", "identity")


def sample_affine(rng: np.random.Generator,
                  min_abs_det: float = MIN_ABS_DET) -> AffineTransform:
    """3x3 matrix with i.i.d. entries uniform on (-1/sqrt(3), 1/sqrt(3)).

    Near-singular draws (|det| below ``min_abs_det``) are rejected and
    redrawn; the rejection count lands in the provenance.
    """
    for attempt in range(_MAX_ATTEMPTS):
        a = rng.uniform(-AFFINE_ENTRY_BOUND, AFFINE_ENTRY_BOUND, size=(3, 3))
        if abs(np.linalg.det(a)) >= min_abs_det:
            return AffineTransform(a, provenance={"kind": "affine", "rejected": attempt})
    raise SamplerStuck(f"no affine with |det| >= {min_abs_det} in {_MAX_ATTEMPTS} draws")


def sample_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation matrix uniform on SO(3), via a normalized random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sample_similarity(rng: np.random.Generator,
                      scale_range=(0.5, 2.0),
                      shift_range=(-1.0, 1.0),
                      allow_reflection: bool = False) -> AffineTransform:
    """Random rotation x uniform scale, plus a random shift."""
    rot = sample_rotation(rng)
    scale = rng.uniform(*scale_range)
    if allow_reflection and rng.integers(2) == 1:
        rot = rot @ np.diag([1.0, 1.0, -1.0])
    shift = rng.uniform(*shift_range, size=3)
    return AffineTransform(scale * rot, shift,
                           provenance={"kind": "similarity", "scale": float(scale)})


def sample_affine_aggressive(cloud: PointCloud, rng: np.random.Generator,
                             candidates: int = 5000,
                             score_triples: int = 512) -> AffineTransform:
    """The candidate affine with the highest estimated deformation.

    Every candidate is scored by a Monte-Carlo angle-difference estimate with
    a fixed small triple budget; all candidates share one triple stream so the
    argmax is taken over comparable estimates.
    """
    if candidates < 1:
        raise ValueError("candidates must be >= 1")
    pool = [sample_affine(rng) for _ in range(candidates)]
    score_seed = int(rng.integers(np.iinfo(np.int64).max))
    best = None
    best_score = -np.inf
    for t in pool:
        est = ead_mc(cloud, geometry.apply(t, cloud), score_triples, score_seed)
        if est.value > best_score:
            best_score = est.value
            best = t
    return AffineTransform(best.linear, provenance={
        "kind": "affine_aggressive", "candidates": candidates,
        "score_triples": score_triples, "score_seed": score_seed,
        "score": best_score,
    })


def _homogeneous(affine: AffineTransform) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = affine.linear
    m[:3, 3] = affine.shift
    return m


def sample_projective(cloud: PointCloud, rng: np.random.Generator,
                      eps_w: float = EPS_W,
                      scalar_range=(0.5, 2.0)) -> ProjectiveTransform:
    """Random projective map composed with a fresh affine draw.

    The cloud must already be unitized (inside [-1, 1]^3).  Three direction
    anchors V_x, V_y, V_z, an origin anchor O_p (all uniform in [-2, 2]^3) and
    scalars a, b, c build the homogeneous matrix with rows (a V_x, a),
    (b V_y, b), (c V_z, c), (d O_p, d).  O_p (and d) are redrawn until every
    homogeneous weight on the cloud's affine image stays above ``eps_w``, so
    no point is thrown toward infinity.
    """
    if np.max(np.abs(cloud.points)) > 1.0 + 1e-9:
        raise ValueError("sample_projective expects a unitized cloud in [-1, 1]^3")
    affine = sample_affine(rng)
    image = cloud.points @ affine.linear.T

    anchors = rng.uniform(-2.0, 2.0, size=(3, 3))  # V_x, V_y, V_z rows
    a, b, c = rng.uniform(*scalar_range, size=3)
    for attempt in range(_MAX_ATTEMPTS):
        origin = rng.uniform(-2.0, 2.0, size=3)
        base = image @ origin + 1.0
        if np.min(np.abs(base)) < eps_w:
            continue
        d = rng.uniform(*scalar_range)
        if d * np.min(np.abs(base)) < eps_w:
            continue
        m = np.empty((4, 4))
        m[0, :3], m[0, 3] = a * anchors[0], a
        m[1, :3], m[1, 3] = b * anchors[1], b
        m[2, :3], m[2, 3] = c * anchors[2], c
        m[3, :3], m[3, 3] = d * origin, d
        return ProjectiveTransform(m @ _homogeneous(affine), eps_w=eps_w,
                                   provenance={"kind": "projective",
                                               "rejected": attempt,
                                               "scalars": (float(a), float(b),
                                                           float(c), float(d))})
    raise SamplerStuck(f"no admissible origin anchor in {_MAX_ATTEMPTS} draws")


@dataclass(frozen=True)
class TransformDistribution:
    """A named transform family plus its sampling parameters."""

    kind: str
    candidates: int = 5000
    score_triples: int = 512
    scalar_range: tuple = (0.5, 2.0)
    eps_w: float = EPS_W
    scale_range: tuple = (0.5, 2.0)
    shift_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.kind not in DISTRIBUTION_KINDS:
            raise ValueError(
                f"unknown distribution {self.kind!r}; options: {DISTRIBUTION_KINDS}")
        if self.candidates < 1 or self.score_triples < 1:
            raise ValueError("candidate and triple counts must be positive")

    @property
    def needs_unitized(self) -> bool:
        return self.kind == "projective"

    def sample(self, cloud: PointCloud, rng: np.random.Generator):
        if self.kind == "affine":
            return sample_affine(rng)
        if self.kind == "affine_aggressive":
            return sample_affine_aggressive(cloud, rng, self.candidates,
                                            self.score_triples)
        if self.kind == "projective":
            return sample_projective(cloud, rng, eps_w=self.eps_w,
                                     scalar_range=self.scalar_range)
        if self.kind == "similarity":
            return sample_similarity(rng, self.scale_range, self.shift_range)
        if self.kind == "identity":
            return AffineTransform.identity()
        raise ValueError(self.kind)  # pragma: no cover


def transform_dataset(records: List[Record], dist: TransformDistribution,
                      augment_time: int, seed: int) -> List[Record]:
    """Apply ``augment_time`` independent transform draws to every record.

    Each output record keeps the source's labels and stores the transform's
    provenance, including the (seed, record, draw) path of its random stream,
    so the dataset is reproducible record-by-record in any evaluation order.
    Projective draws unitize the source cloud first, as that family requires.
    """
    if augment_time < 1:
        raise ValueError("augment_time must be >= 1")
    out: List[Record] = []
    for r_idx, rec in enumerate(records):
        source = geometry.unitize(rec.cloud) if dist.needs_unitized else rec.cloud
        for j in range(augment_time):
            rng = make_rng(seed, r_idx, j)
            t = dist.sample(source, rng)
            prov = dict(rec.provenance)
            prov.update({
                "transform_kind": dist.kind,
                "seed_path": (int(seed), r_idx, j),
                "transform_provenance": t.provenance,
            })
            out.append(Record(geometry.apply(t, source), label=rec.label,
                              provenance=prov))
    return out
