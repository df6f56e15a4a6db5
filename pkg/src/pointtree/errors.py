"""Exception hierarchy shared by all pointtree modules."""


class PointTreeError(Exception):
    """Base class for all library errors."""


class DegenerateCloud(PointTreeError):
    """Cloud has no usable geometry (e.g. every point coincides)."""


class RankDeficient(PointTreeError):
    """Cloud covariance is (numerically) rank-deficient where full rank is required."""


class NearInfiniteProjection(PointTreeError):
    """A homogeneous weight fell below the safety threshold."""


class NotPowerOfTwo(PointTreeError):
    """Point count is not a power of two and padding was not requested."""


class DimensionMismatch(PointTreeError):
    """Incompatible vector dimensions in a tree information flow."""


class ShapeMismatch(PointTreeError):
    """Incompatible tensor shapes in a differentiable op."""


class NonFiniteValue(PointTreeError):
    """A forward pass produced NaN or Inf."""


class NonFiniteLoss(PointTreeError):
    """Training loss became NaN or Inf."""


class DegenerateTriple(PointTreeError):
    """An angle is undefined because a vertex coincides with a ray endpoint."""


class TooManyDegenerateTriples(PointTreeError):
    """Monte-Carlo triple resampling exceeded its attempt budget."""


class SamplerStuck(PointTreeError):
    """A rejection sampler exhausted its attempt budget."""


class EmptySplit(PointTreeError):
    """A requested dataset split received no records."""
