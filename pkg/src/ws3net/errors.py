"""Exception types shared across the package.

Everything derives from Ws3Error so callers can catch package failures
with a single except clause. Input-validation errors subclass ValueError
as well, keeping plain-numpy call sites idiomatic.
"""


class Ws3Error(Exception):
    """Base class for all package-specific errors."""


class ValidationError(Ws3Error, ValueError):
    """Malformed argument or input data."""


class DuplicateCoordinateError(ValidationError):
    """Two rows of a coordinate array encode the same (batch, x, y, z)."""

    def __init__(self, row_a: int, row_b: int, coord):
        self.row_a = int(row_a)
        self.row_b = int(row_b)
        self.coord = tuple(int(c) for c in coord)
        super().__init__(
            f"duplicate coordinate {self.coord} at rows {self.row_a} and {self.row_b}"
        )


class StrideMismatchError(ValidationError):
    """Coordinates or strides violate the stride divisibility contract."""


class ShapeError(ValidationError):
    """Array shape does not match the declared layer or tensor geometry."""


class VoxsetFormatError(ValidationError):
    """Unparseable or inconsistent voxset file."""


class CheckpointError(Ws3Error):
    """Corrupt, truncated, or incompatible checkpoint file."""


class ConfigError(Ws3Error):
    """Invalid run configuration (unknown key, bad value, missing path)."""


class DegenerateLayerError(Ws3Error):
    """A pruning step targeted a layer with no remaining weights."""


class PruneDivergenceError(Ws3Error):
    """Fine-tuning after a prune step produced a non-finite loss."""

    def __init__(self, step: int, message: str):
        self.step = int(step)
        super().__init__(f"prune step {self.step}: {message}")


class TrainingError(Ws3Error):
    """Optimizer hit a non-finite gradient or an inconsistent batch."""
