"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap."""

    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a named quantity."""

    def __init__(self, term, detail=""):
        msg = f"non-finite value in {term}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.term = term


class RankDeficientError(ArithmeticError):
    """A matrix has fewer significant singular values than required."""

    def __init__(self, message, spectrum=None):
        if spectrum is not None:
            message += f"; spectrum = {list(map(float, spectrum))}"
        super().__init__(message)
        self.spectrum = spectrum


class DegeneratePointError(ArithmeticError):
    """Every probe direction lies in the kernel of the Jacobian."""
