"""Exception types shared across the package."""


class IllConditionedError(RuntimeError):
    """A matrix required to be (numerically) SPD could not be factorized."""


class NumericalOverflowError(RuntimeError):
    """Propagation produced non-finite values.

    ``step`` identifies the offending integration step or cycle when the
    caller can supply one.
    """

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
