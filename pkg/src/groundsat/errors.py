"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class ConfigError(ValueError):
    """Bad configuration value or unknown option."""


class ParseError(ValueError):
    """Malformed external file; message carries location info."""


class StageError(RuntimeError):
    """A pipeline stage cannot proceed (e.g. degenerate clustering)."""


class GroundingFailure(RuntimeError):
    """The permutation estimate never converged; carries the final estimate."""

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class SamplingError(RuntimeError):
    """Rejection sampling exhausted its budget; carries attempt counts."""

    def __init__(self, message, tries=0):
        super().__init__(message)
        self.tries = tries
