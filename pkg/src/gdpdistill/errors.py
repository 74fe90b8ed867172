"""Exception hierarchy shared by the accounting, training and distillation code."""


class PrivacyError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(PrivacyError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConvergenceError(PrivacyError, RuntimeError):
    """A numerical search failed to converge inside its bracket."""


class NoiseOverflowError(PrivacyError, OverflowError):
    """The noise multiplier is too small for exp(1/sigma^2) to be represented."""

    def __init__(self, sigma: float, threshold: float):
        self.sigma = sigma
        self.threshold = threshold
        super().__init__(
            f"noise multiplier sigma={sigma!r} is below the supported threshold "
            f"{threshold}; exp(1/sigma^2) would overflow"
        )


class InfeasibleBudgetError(PrivacyError, ValueError):
    """The requested allocation spends more than the total budget."""

    def __init__(self, message: str, components: tuple[str, ...] = ()):
        self.components = components
        super().__init__(message)


class BracketError(PrivacyError, ValueError):
    """A bracketed search was started on an interval that does not straddle the target."""

    def __init__(self, lo: float, hi: float, score_lo: float, score_hi: float, target: float):
        self.lo, self.hi = lo, hi
        self.score_lo, self.score_hi = score_lo, score_hi
        self.target = target
        super().__init__(
            f"target {target!r} not bracketed: score({lo!r})={score_lo!r}, "
            f"score({hi!r})={score_hi!r}"
        )


class ShapeError(PrivacyError, ValueError):
    """Array dimensions do not match the model or dataset."""


class ContractError(PrivacyError, ValueError):
    """A caller violated an interface contract (e.g. non-scalar loss, class mismatch)."""


class BudgetBreachError(PrivacyError, RuntimeError):
    """The privacy ledger exceeded the allocated budget."""


class DivergenceError(PrivacyError, RuntimeError):
    """An optimisation produced non-finite values."""

    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        super().__init__(message)


class PrivateAccessError(PrivacyError, RuntimeError):
    """The private dataset was read outside a declared mechanism."""


class ParseError(PrivacyError, ValueError):
    """A file did not match its expected schema."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
