"""Exception hierarchy shared by all ram3d modules.

Every error carries a ``category`` used by the CLI to pick an exit code and
prefix the message (config | data | numeric | io).
"""


class Ram3dError(Exception):
    category = "data"


class ConfigError(Ram3dError):
    category = "config"


class CountMismatch(Ram3dError):
    pass


class ShapeError(Ram3dError):
    pass


class ParseError(Ram3dError):
    pass


class EmptyMask(Ram3dError):
    pass


class IoError(Ram3dError):
    category = "io"


class NumericalError(Ram3dError):
    category = "numeric"

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class DegenerateTimestep(NumericalError):
    pass


class GuidanceError(Ram3dError):
    pass


class FeatureError(Ram3dError):
    pass


class VersionError(Ram3dError):
    pass


class ConfigMismatch(Ram3dError):
    category = "config"
