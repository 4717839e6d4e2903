"""Exception types shared across the package."""


class KoopGameError(Exception):
    """Base class for package errors."""


class NonFiniteError(KoopGameError, FloatingPointError):
    """A state, matrix or cost became NaN or infinite."""


class RankDeficientError(KoopGameError, ValueError):
    """A least-squares system does not have the expected column rank."""


class ModelMismatchError(KoopGameError, ValueError):
    """A model lacks observables required by a downstream formulation."""


class ContourTooCloseError(KoopGameError, ValueError):
    """Quadrature nodes do not lie strictly right of the spectrum."""


class SingularNodeError(KoopGameError, ArithmeticError):
    """A resolvent solve at a quadrature node failed."""


class LinearSolveFailure(KoopGameError, ArithmeticError):
    """A Newton system stayed singular after regularization."""


class InadmissibleStrategyError(KoopGameError, ValueError):
    """A candidate strategy violates its control bounds."""


class GridMismatchError(KoopGameError, ValueError):
    """Two fields are defined on incompatible grids."""


class ConfigError(KoopGameError, ValueError):
    """A configuration file or value is invalid."""
