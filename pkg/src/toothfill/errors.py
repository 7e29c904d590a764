"""Exception hierarchy.

Every error raised on purpose by the package derives from ``ToothfillError``;
the four top-level categories map one-to-one onto CLI exit codes.
"""


class ToothfillError(Exception):
    exit_code = 1


class ConfigError(ToothfillError, ValueError):
    exit_code = 2


class DataIOError(ToothfillError, OSError):
    exit_code = 3


class ValidationError(ToothfillError, ValueError):
    exit_code = 4


class NumericError(ToothfillError, ArithmeticError):
    exit_code = 5


class GridMismatchError(ValidationError):
    """Two grids that must share resolution/origin/spacing do not."""


class NonFiniteFieldError(NumericError):
    def __init__(self, index):
        self.index = tuple(int(i) for i in index)
        super().__init__(f"field returned a non-finite value at voxel {self.index}")


class MeshParseError(DataIOError):
    pass


class LabelCountError(ValidationError):
    pass


class UnknownFDIError(ValidationError):
    pass


class EmptyMeshError(ValidationError):
    pass


class ShapeMismatchError(ValidationError):
    pass
