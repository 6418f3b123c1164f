"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`NpuSrError`, which is
also a :class:`ValueError` so callers that only care about bad input can catch
the builtin.
"""


class NpuSrError(ValueError):
    pass


class ShapeMismatchError(NpuSrError):
    pass


class DivisibilityError(NpuSrError):
    pass


# -- graph --------------------------------------------------------------------


class GraphError(NpuSrError):
    """Base for graph validation failures; ``node_id`` names the culprit."""

    def __init__(self, node_id, message):
        self.node_id = node_id
        super().__init__(f"node {node_id!r}: {message}")


class CycleError(GraphError):
    pass


class DanglingInputError(GraphError):
    pass


class ChannelMismatchError(GraphError):
    pass


class GraphDivisibilityError(GraphError, DivisibilityError):
    pass


class ArityError(GraphError):
    pass


class DuplicateIdError(GraphError):
    pass


class UnreachableNodeError(GraphError):
    pass


class ScaleMismatchError(GraphError):
    pass


# -- model files ----------------------------------------------------------------


class ManifestError(NpuSrError):
    pass


class VersionMismatchError(ManifestError):
    pass


class OffsetOverflowError(ManifestError):
    pass


class ManifestFormatError(ManifestError):
    pass


# -- rewriting / quantization / evaluation --------------------------------------


class FusionError(NpuSrError):
    pass


class QuantizationError(NpuSrError):
    pass


class AccumulatorOverflowError(QuantizationError):
    def __init__(self, node_id, message):
        self.node_id = node_id
        super().__init__(f"node {node_id!r}: {message}")


class DatasetError(NpuSrError):
    pass
