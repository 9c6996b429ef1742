"""Exception types shared across the package."""


class EndoclipError(Exception):
    """Base class for all package errors."""


class ShapeError(EndoclipError):
    """Operands have incompatible shapes; message names both shapes."""


class ConfigError(EndoclipError):
    """A configuration value violates its invariants."""


class ContractError(EndoclipError):
    """A caller broke an operation's precondition."""


class LabelError(EndoclipError):
    """A class name or label index is outside the closed class set."""


class ManifestError(EndoclipError):
    """A dataset manifest record is malformed or unreadable."""


class EvaluationError(EndoclipError):
    """An evaluation request is inconsistent with its inputs."""


class NumericError(EndoclipError):
    """Training or a gradient check produced non-finite or out-of-tolerance values."""
