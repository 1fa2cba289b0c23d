"""Exception hierarchy.

Every error raised by the package derives from ``WpnavError``. The CLI maps
``DataError`` subclasses to exit code 2 and ``DivergedTraining`` to exit 3.
"""


class WpnavError(Exception):
    pass


class DataError(WpnavError):
    """Bad input data: malformed files, invalid episodes, broken checkpoints."""


class MalformedMap(DataError):
    pass


class MalformedInput(DataError):
    pass


class ConfigError(DataError):
    pass


class InvalidSpec(DataError):
    pass


class InsufficientFreeSpace(DataError):
    pass


class BlockedEndpoint(DataError):
    pass


class NoPath(DataError):
    pass


class InvalidN(WpnavError, ValueError):
    pass


class InvalidFraction(WpnavError, ValueError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class LengthMismatch(WpnavError, ValueError):
    pass


class NonFiniteInput(WpnavError, ValueError):
    pass


class NonFiniteGradient(WpnavError, FloatingPointError):
    pass


class NonFiniteLoss(WpnavError, FloatingPointError):
    pass


class NoRecordedForward(WpnavError, RuntimeError):
    pass


class EmptyInput(WpnavError, ValueError):
    pass


class NonPositiveShortestPath(WpnavError, ValueError):
    pass


class UntrainedEncoder(WpnavError, RuntimeError):
    pass


class CheckpointError(DataError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumFail(CheckpointError):
    pass


class MapMismatch(DataError):
    """Suite and checkpoint/map were produced for different maps."""


class DivergedTraining(WpnavError, FloatingPointError):
    pass
