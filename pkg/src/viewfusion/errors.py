"""Exception types raised across the package."""


class ViewFusionError(Exception):
    """Base class for all package errors."""


class VolumeError(ViewFusionError, ValueError):
    """Invalid volume geometry or contents."""


class GeometryMismatchError(VolumeError):
    """Two volumes (or maps) that must share geometry do not."""


class PatchError(ViewFusionError, ValueError):
    """Patch shapes or lattices are incompatible."""


class ShapeError(ViewFusionError, ValueError):
    """Tensor shapes or channel counts are incompatible."""


class NumericError(ViewFusionError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class DegenerateVoxelError(ViewFusionError, ArithmeticError):
    """Every label hypothesis at a voxel has zero probability."""

    def __init__(self, index):
        self.index = tuple(int(i) for i in index)
        super().__init__(f"all label hypotheses vanish at voxel {self.index}")


class AbsentLabelError(ViewFusionError, ArithmeticError):
    """The posterior mass of a label vanished, so its performance column is undefined."""

    def __init__(self, labels):
        self.labels = [int(s) for s in labels]
        super().__init__(f"posterior mass vanished for labels {self.labels}")


class UndefinedMetricError(ViewFusionError, ValueError):
    """A metric is undefined for the given masks (e.g. empty surface)."""


class FormatError(ViewFusionError, ValueError):
    """Malformed volume file."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class SpecError(ViewFusionError, ValueError):
    """Invalid phantom or corruption specification."""
