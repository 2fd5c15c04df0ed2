"""Exception types shared across the package."""


class SinkgraphError(Exception):
    """Base class for all errors raised by this package."""


# --- graph construction / batching ---

class IndexOutOfRange(SinkgraphError):
    pass


class SelfLoop(SinkgraphError):
    pass


class DuplicateEdge(SinkgraphError):
    pass


class EmptyBatch(SinkgraphError):
    pass


class FeatureDimMismatch(SinkgraphError):
    pass


class InvalidPermutation(SinkgraphError):
    pass


# --- synthetic data generation ---

class SizeTooSmall(SinkgraphError):
    pass


class InvalidConfig(SinkgraphError):
    pass


# --- tensors and autodiff ---

class ShapeMismatch(SinkgraphError):
    pass


class NonFiniteValue(SinkgraphError):
    pass


class NotScalar(SinkgraphError):
    pass


class DetachedTensor(SinkgraphError):
    pass


class MissingGradient(SinkgraphError):
    pass


# --- transport / attention ---

class EmptySegment(SinkgraphError):
    pass


class InvalidRatio(SinkgraphError):
    pass


class ZeroMarginal(SinkgraphError):
    pass


class SegmentTooSmall(SinkgraphError):
    pass


class DegenerateTrace(SinkgraphError):
    pass


# --- model / training ---

class TooFewEdges(SinkgraphError):
    pass


class InvalidLabel(SinkgraphError):
    pass


class EmptyDataset(SinkgraphError):
    pass


class Divergence(SinkgraphError):
    pass


class MissingMask(SinkgraphError):
    pass
