"""Exception types shared across the package."""


class GmixdynError(Exception):
    """Base class for all package errors."""


class GramNotPSD(GmixdynError):
    """Overlap Gram matrix has an eigenvalue below the PSD tolerance."""


class DimensionTooSmall(GmixdynError):
    """Ambient dimension cannot host the requested mean geometry."""


class NotPositiveDefinite(GmixdynError):
    """A diagonal Schur complement fell at or below the jitter threshold."""

    def __init__(self, msg, step=None, min_eig=None):
        super().__init__(msg)
        self.step = step
        self.min_eig = min_eig


class SingularFactor(GmixdynError):
    """A triangular solve against a Cholesky-type factor failed."""


class NonFiniteValue(GmixdynError):
    """A trajectory block became non-finite (divergent step size)."""

    def __init__(self, msg, step=None, block=None):
        super().__init__(msg)
        self.step = step
        self.block = block


class InvalidRange(GmixdynError):
    """An algorithm constant is outside its admissible range."""


class NotConverged(GmixdynError):
    """Fixed-point iteration hit max_iter above tolerance."""

    def __init__(self, msg, residual=None, last=None):
        super().__init__(msg)
        self.residual = residual
        self.last = last


class EstimatorDegenerate(GmixdynError):
    """Monte-Carlo standard error of a kernel entry exceeded its cap."""


class InsufficientReplications(GmixdynError):
    """A variance estimate was requested from fewer than two replications."""
