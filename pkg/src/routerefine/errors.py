"""Exception types shared across the package."""


class RouteRefineError(Exception):
    """Base class for all package errors."""


class ParameterError(RouteRefineError, ValueError):
    """A generation or configuration parameter is outside its legal range."""


class SizeError(RouteRefineError, ValueError):
    """The requested instance size is too small for the variant semantics."""


class ParseError(RouteRefineError, ValueError):
    """A file or record could not be parsed."""


class SchemaError(RouteRefineError, ValueError):
    """A record is structurally inconsistent with its declared variant."""


class InvariantError(RouteRefineError, ValueError):
    """Instance or solution data violates a documented invariant."""


class StructureError(RouteRefineError, ValueError):
    """A solution is structurally invalid (duplicate or missing nodes)."""


class CapacityExceededError(RouteRefineError, ValueError):
    """An exhaustive search was asked to exceed its configured size cap."""


class ActionError(RouteRefineError, ValueError):
    """A refinement action violates its validity rules."""


class DeadEndError(RouteRefineError, RuntimeError):
    """All candidate nodes are masked while customers remain unvisited."""


class ShapeError(RouteRefineError, ValueError):
    """Tensor operands have incompatible shapes."""


class NumericError(RouteRefineError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ManifestError(RouteRefineError, ValueError):
    """A checkpoint manifest does not match the requested configuration."""


class ConfigError(RouteRefineError, ValueError):
    """A run configuration value is missing or inconsistent."""


class AlignmentError(RouteRefineError, ValueError):
    """A reference file does not line up with the evaluated dataset."""
