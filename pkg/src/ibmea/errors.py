"""Exception types shared across the package."""


class IBMEAError(Exception):
    pass


class ParseError(IBMEAError):
    """A dataset file line could not be parsed."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class ValidationError(IBMEAError):
    """Data violates a structural invariant (ids out of range, bad dims, ...)."""


class ConfigError(IBMEAError):
    """Invalid configuration or an unsatisfiable request."""


class NumericalError(IBMEAError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, message, terms=None):
        self.terms = dict(terms or {})
        super().__init__(message)
