"""Exception hierarchy shared across the package."""


class CphError(Exception):
    """Base class for all package errors."""


class ValidationError(CphError):
    """Invalid input: bad shapes, non-finite entries, broken invariants."""


class DomainError(CphError):
    """Argument outside the mathematical domain of an operation."""


class SpectrumError(DomainError):
    """Matrix spectrum unsupported by the requested operation."""


class NumericalUnderflow(CphError):
    """A likelihood or probability underflowed below representable range."""


class EstimationError(CphError):
    """An iterative estimation procedure failed to produce a result."""


class DataError(CphError):
    """Malformed data file or dataset."""
