"""Exception hierarchy shared across the toolkit.

The CLI maps these onto distinct process exit codes, so keeping the
classes coarse (data vs. model vs. numeric) is deliberate.
"""


class PickrankError(Exception):
    """Base class for all toolkit errors."""


class DataError(PickrankError):
    """Malformed or inconsistent dataset/manifest/input data. Exit code 3."""


class EdgeBoxError(DataError):
    """A crop box touches the border of its source panorama."""


class ModelError(PickrankError):
    """Model/checkpoint construction or compatibility failure. Exit code 4."""


class StaleIndexError(ModelError):
    """A persisted embedding index does not match the serving model/backbone."""


class NumericError(PickrankError):
    """Non-finite values or numerical breakdown at runtime. Exit code 5."""


class BackboneUnavailableError(PickrankError):
    """The requested embedding backbone could not be loaded in this environment."""
