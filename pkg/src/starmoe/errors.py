"""Exception types shared across the package."""


class NumericDomainError(ArithmeticError):
    """A value left the domain where an operation is defined (NaN, inf, ...)."""


class InfiniteDivergenceError(NumericDomainError):
    """KL(p || q) with p_j > 0 and q_j == 0."""


class InvalidStateError(RuntimeError):
    """Operation called out of order (e.g. tasks presented out of sequence)."""


class InvariantViolation(RuntimeError):
    """An internal invariant (such as the drift bound) failed during a run."""
