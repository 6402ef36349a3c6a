"""Exception hierarchy shared by all solver modules."""


class MvdualError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(MvdualError, ValueError):
    pass


class InvalidModelError(MvdualError, ValueError):
    """The market model breaks a structural requirement (e.g. singular volatility)."""


class IllConditionedBasisError(MvdualError):
    def __init__(self, step: int, condition: float):
        super().__init__(f"regression basis ill-conditioned at step {step} (cond={condition:.3e})")
        self.step = step
        self.condition = condition


class NumericalBlowupError(MvdualError):
    pass


class UnsupportedForNonsmoothError(MvdualError):
    pass


class DegenerateInstanceError(MvdualError):
    """y >= X0 of the constant terminal wealth c, so the variance is trivially 0."""


class BracketError(MvdualError):
    """No sign change found while bracketing a multiplier."""

    def __init__(self, message: str, scanned: tuple[float, float] | None = None):
        super().__init__(message)
        self.scanned = scanned


class PicardDivergenceError(MvdualError):
    """The coupled forward-backward iteration hit max_iters; carries the partial report."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class InfeasibilityAnalysisError(MvdualError):
    pass


class ConfigError(MvdualError, ValueError):
    pass
