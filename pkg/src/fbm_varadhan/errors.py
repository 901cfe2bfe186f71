"""Exception types shared across modules."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class FbmError(RuntimeError):
    """Covariance factorisation failed while sampling."""


class FlowBlowUp(RuntimeError):
    """State norm exceeded the blow-up guard during an ODE solve."""


class JetOrderError(ValueError):
    """A vector field system cannot supply derivatives of the requested order."""


class OmegaSpanError(RuntimeError):
    """Bracket fields fail to span at a point: least-squares residual too large.

    Attributes
    ----------
    point : ndarray
        State at which the expansion failed.
    residual : float
    """

    def __init__(self, message, point=None, residual=None):
        super().__init__(message)
        self.point = point
        self.residual = residual


class InfeasibleTarget(RuntimeError):
    """No optimiser restart reached the target within the constraint tolerance."""
