"""Exception hierarchy shared by all modules."""


class NeuroSelectError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(NeuroSelectError, ValueError):
    pass


class MaskError(NeuroSelectError, ValueError):
    pass


class FormatError(NeuroSelectError, ValueError):
    """A binary file (checkpoint, snapshot, IDX) is malformed."""


class VersionError(FormatError):
    pass


class ConfigError(NeuroSelectError, ValueError):
    pass


class BudgetError(NeuroSelectError, ValueError):
    """The parameter budget cannot accommodate the required neurons."""


class DataError(NeuroSelectError):
    pass
