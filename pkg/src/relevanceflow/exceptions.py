class RelevanceFlowError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(RelevanceFlowError, ValueError):
    pass


class NonFiniteError(RelevanceFlowError, FloatingPointError):
    pass


class DegenerateDenominatorError(RelevanceFlowError, ZeroDivisionError):
    """A relevance rule hit a zero denominator with ``eps=0``."""


class DivergenceError(RelevanceFlowError, RuntimeError):
    pass


class CorruptFileError(RelevanceFlowError, ValueError):
    pass


class VersionMismatchError(RelevanceFlowError, ValueError):
    pass


class SchemaError(RelevanceFlowError, ValueError):
    pass


class ParseError(RelevanceFlowError, ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno
