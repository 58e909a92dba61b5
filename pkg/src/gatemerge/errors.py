"""Exception hierarchy shared by every gatemerge module."""


class GateMergeError(Exception):
    """Base class for all validation failures raised by the toolkit."""


class DimensionError(GateMergeError, ValueError):
    pass


class InvalidInputError(GateMergeError, ValueError):
    pass


class InvalidConfigError(GateMergeError, ValueError):
    pass


class DegeneratePrototypeError(InvalidInputError):
    pass


class MissingTensorError(GateMergeError, KeyError):
    pass


class CollisionError(GateMergeError, ValueError):
    pass


class FormatError(GateMergeError, ValueError):
    """Malformed container bytes or a container that violates its invariants."""


class TruncationError(FormatError):
    pass


class DataError(FormatError):
    """Container payload holds non-finite values."""


class SchemaError(FormatError):
    """Container is well-formed but lacks the entries a bundle type requires."""
