"""Exception taxonomy shared across the package.

The CLI maps these onto distinct process exit codes (see cli.EXIT_CODES).
"""


class LMNetError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(LMNetError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class UndefinedAngleError(InvalidArgumentError):
    """Observation angles requested for a point at the sensor origin."""


class FormatError(LMNetError):
    """A file's bytes do not match its declared format (magic, truncation,
    malformed records, shape mismatches against the expected architecture)."""


class CalibError(FormatError):
    """A calibration file is missing a required matrix."""


class CorruptIndicesError(LMNetError):
    """Pooling indices point outside the unpooled output tensor."""


class DegenerateSceneError(LMNetError):
    """A scene (or a whole dataset) carries no usable object/background split."""


class DivergenceError(LMNetError):
    """Training produced a non-finite gradient or parameter."""


class CapacityError(LMNetError):
    """Scene synthesis could not place the requested objects."""
