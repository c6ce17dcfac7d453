"""Exception types shared across the package."""


class LrsError(Exception):
    """Base class for all package errors."""


class ConfigError(LrsError):
    """A configuration violates an invariant or is internally inconsistent."""


class DomainError(LrsError):
    """An argument is outside the mathematical domain of an operation."""


class RankDeficient(LrsError):
    """QR factorization hit a (numerically) rank-deficient input."""


class SingularSystem(LrsError):
    """A linear system required to be nonsingular is not."""


class DegenerateMoment(LrsError):
    """The moment matrix has no well-defined top-r eigenspace."""


class DegenerateMomentWarning(UserWarning):
    """Top-r eigengap is numerically zero; the returned subspace is arbitrary."""


class InfeasibleSparsity(LrsError):
    """No support assignment satisfies both the column and row budgets."""


class PrivacyBudgetMismatch(LrsError):
    """More private releases were requested than the noise was calibrated for."""


class FormatError(LrsError):
    """A dataset or model file does not match the documented schema."""
