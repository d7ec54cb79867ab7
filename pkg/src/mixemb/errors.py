"""Exception hierarchy shared by every module of the package."""


class MixEmbError(Exception):
    """Base class for all package errors."""


class ShapeError(MixEmbError, ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NormError(MixEmbError, ValueError):
    """A vector slice is too close to zero to normalize."""


class NonFiniteError(MixEmbError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class RangeError(MixEmbError, ValueError):
    """An argument lies outside its admissible range."""


class ConfigError(MixEmbError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(MixEmbError, OSError):
    """Dataset or checkpoint I/O failure."""

    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)
