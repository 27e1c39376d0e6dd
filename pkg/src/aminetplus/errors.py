"""Exception hierarchy.

Every error raised on purpose by this package derives from :class:`MilError`
and carries a ``category`` used by the command line to pick an exit code.
"""


class MilError(Exception):
    category = "internal"


class ShapeError(MilError, ValueError):
    category = "numeric"

    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message}: " + " vs ".join(str(s) for s in self.shapes)
        super().__init__(message)


class DomainError(MilError, ValueError):
    category = "numeric"


class MaskError(MilError, ValueError):
    """A reduction or softmax slice had no valid entries."""

    category = "numeric"


class NumericError(MilError, FloatingPointError):
    category = "numeric"


class TapeError(MilError, RuntimeError):
    category = "numeric"


class NondeterminismError(MilError, RuntimeError):
    category = "numeric"


class ConfigError(MilError, ValueError):
    category = "config"


class DataError(MilError, ValueError):
    category = "data"


class CheckpointError(MilError, ValueError):
    category = "data"
