"""Exception types shared across the package."""


class CtbnError(Exception):
    """Base class for all errors raised by this package."""


class ModelValidationError(CtbnError, ValueError):
    """A model component violates a structural constraint."""


class ScopeCollisionError(CtbnError, ValueError):
    """Two dynamics matrices supply rates for the same variable."""


class ZeroProbabilityError(CtbnError, ArithmeticError):
    """The current evidence (or approximation) has probability zero."""


class ZeroSupportError(CtbnError, ArithmeticError):
    """Message division hit a zero entry that the target still supports."""


class IntegrationError(CtbnError, RuntimeError):
    """The adaptive integrator could not meet its tolerance."""


class DegenerateStateError(CtbnError, ArithmeticError):
    """A state has zero expected residence time but outgoing transitions."""


class OracleInfeasibleError(CtbnError, ValueError):
    """The joint state space exceeds the exact-inference cap."""


class FamilyPreservationError(CtbnError, ValueError):
    """A CIM or initial factor cannot be placed in any cluster."""
