"""
Error types raised by the numerical core
"""


class KronRoundError(Exception):
    """Base class for all kronround errors"""


class NotPositiveDefinite(KronRoundError, ArithmeticError):
    """A factorization met a non-positive pivot (after regularization)"""


class BadBlockSize(KronRoundError, ValueError):
    """Block size does not divide the matrix dimension"""


class NoConvergence(KronRoundError, ArithmeticError):
    """An iterative procedure exceeded its budget"""


class ZeroMatrix(KronRoundError, ArithmeticError):
    """A matrix that must be nonzero has (numerically) zero norm"""


class ShapeMismatch(KronRoundError, ValueError):
    """Inconsistent shapes between operands"""


class TooLarge(KronRoundError, ValueError):
    """Dense computation requested beyond the configured size cap"""


class NotPowerOfTwo(KronRoundError, ValueError):
    """Hadamard transforms need power-of-two dimensions"""


class EmptyData(KronRoundError, ValueError):
    """A dataset with no examples was supplied"""
