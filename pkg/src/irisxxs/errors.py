"""Exception types shared across the pipeline.

Each class carries the CLI exit code it maps to, so ``cli`` never has to
keep a separate lookup table in sync.
"""


class IrisError(Exception):
    exit_code = 9


class InputError(IrisError, ValueError):
    """Bad arguments, unwritable paths, malformed files."""

    exit_code = 2


class ShapeError(InputError):
    pass


class WeightFileError(InputError):
    pass


class FilterFileError(InputError):
    pass


class ImageFormatError(InputError):
    pass


class ManifestError(InputError):
    pass


class Diverged(IrisError):
    exit_code = 3

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class NotFound(IrisError):
    """No eyes / no boundary / empty mask."""

    exit_code = 4


class IrisTooSmall(IrisError):
    exit_code = 5


class Degenerate(IrisError):
    """Geometry that cannot define a circle or a box."""

    exit_code = 6


class UnusableTemplate(IrisError):
    exit_code = 7


class ConfigError(IrisError):
    exit_code = 8
