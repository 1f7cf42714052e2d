"""Exception types shared across the package."""


class ImmuLabError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(ImmuLabError):
    """Operand shapes are incompatible."""


class NotSPD(ImmuLabError):
    """Matrix is not symmetric positive definite (failed Cholesky pivot or asymmetry)."""


class NonFiniteFunctionValue(ImmuLabError):
    """A probed function returned NaN or Inf during finite differencing."""


class SingularQ(NotSPD):
    """Gram matrix of the regularization embeddings is singular (needs a ridge)."""


class SingularSchur(ImmuLabError):
    """Schur complement C Q^-1 C^T is singular; constraint rows are rank deficient."""


class StaleFactorization(ImmuLabError):
    """A merge backward was called with a solution that does not belong to the problem."""


class SignatureMismatch(ImmuLabError):
    """Parameter sets have different shape signatures and cannot be combined."""


class ShapeMismatch(ImmuLabError):
    """Tensor batch shapes are inconsistent with the model architecture."""


class IncompatibleSignature(SignatureMismatch):
    """Adaptation input model does not match the expected parameter signature."""


class NonFiniteLoss(ImmuLabError):
    """Training loss diverged to NaN/Inf; carries the trajectory recorded so far."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = list(trajectory) if trajectory is not None else []


class NonFiniteGradient(ImmuLabError):
    """An upper-level gradient contained NaN/Inf entries."""


class EmptyBatch(ImmuLabError):
    """Similarity was requested on an empty batch."""


class DegenerateDenominator(ImmuLabError):
    """A gap-ratio denominator is too close to zero for the ratio to mean anything."""


class ConfigError(ImmuLabError):
    """Experiment configuration failed validation; message names the offending key."""


class ResampleLimitExceeded(ImmuLabError):
    """Could not draw concept embeddings satisfying the pairwise-cosine bound."""
