"""Exception hierarchy shared by all modules."""


class NetctlError(Exception):
    pass


class ParameterError(NetctlError, ValueError):
    pass


class ParseError(NetctlError, ValueError):
    pass


class ShapeError(NetctlError, ValueError):
    pass


class DivergenceError(NetctlError, ArithmeticError):
    pass


class FitError(NetctlError):
    pass


class ConditioningError(NetctlError, ArithmeticError):
    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class InfeasibleError(NetctlError):
    """Raised when a QP has an empty feasible set.

    ``certificate`` holds nonnegative multipliers y for the general
    inequality rows with Gᵀy balanced by the box and hᵀy below the box
    support value (a Farkas certificate).
    """

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class IntegrationError(NetctlError, ArithmeticError):
    pass
