"""Exception types shared across the package."""


class MgwellError(Exception):
    """Base class for all package-specific errors."""


class ContractError(MgwellError):
    """A caller violated a documented precondition."""


class InvalidFidelityError(MgwellError):
    """Grid fidelity factor outside (0, 1] or a coarsening that destroys wells."""


class ConstraintViolationError(MgwellError):
    """Source/sink balance or another physical constraint is not satisfied."""


class NumericalError(MgwellError):
    """An iterative solve failed to converge or produced non-finite values."""
