"""Exception types shared across the toolkit.

Grouped the way the CLI maps them to exit codes: data/file problems vs
numeric/geometry failures. Everything derives from SarSearchError so callers
can catch the whole family at once.
"""


class SarSearchError(Exception):
    """Base class for all sarsearch errors."""


# --- file / data errors ---------------------------------------------------


class IoError(SarSearchError):
    """Underlying OS-level read/write failure."""


class MalformedHeader(SarSearchError):
    """File header does not match the expected container format."""


class MalformedFile(SarSearchError):
    """File body is truncated or internally inconsistent."""


class SizeMismatch(SarSearchError):
    """Payload length disagrees with the declared dimensions."""


class VersionMismatch(SarSearchError):
    """Container version is not supported by this build."""


class DatasetTooSmall(SarSearchError):
    """Training dataset has fewer items than one minibatch."""


class DuplicateId(SarSearchError):
    """Record id already present in the index."""


class EmptyIndex(SarSearchError):
    """Query issued against an index with no records."""


class SpecTooLarge(SarSearchError):
    """Patch/split geometry does not fit inside the scene."""


class ListTooShort(SarSearchError):
    """Ranking shorter than the requested precision cutoff."""


# --- numeric / geometry errors --------------------------------------------


class SingularHomography(SarSearchError):
    """Homography matrix is not invertible."""


class PointAtInfinity(SarSearchError):
    """Transformed point has a vanishing homogeneous coordinate."""


class DegenerateCorrespondences(SarSearchError):
    """Four-point system is rank deficient; no unique homography."""


class SamplingExhausted(SarSearchError):
    """Rejection sampling failed to produce a convex corner draw."""


class NonPositiveExponent(SarSearchError):
    """Pooling exponent must be strictly positive."""


class ShapeMismatch(SarSearchError):
    """Tensor shapes disagree with the architecture configuration."""


class ZeroNorm(SarSearchError):
    """Descriptor norm too small to normalize."""


class StaleCache(SarSearchError):
    """Backward called with a cache from a different forward pass."""


class DimensionMismatch(SarSearchError):
    """Vector dimensionality differs from the expected one."""


# Index module historically called this DimMismatch; same condition.
DimMismatch = DimensionMismatch


class BatchExceedsQueue(SarSearchError):
    """More new keys than the queue can hold."""


class NoRelevantItems(SarSearchError):
    """Query has no relevant records in the database."""
