"""Exception types shared across the package."""


class ComprError(Exception):
    """Base class for all package errors."""


class DimensionError(ComprError, ValueError):
    pass


class DegenerateVectorError(ComprError, ArithmeticError):
    pass


class ContractError(ComprError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(ComprError, FloatingPointError):
    pass


class GenerationError(ComprError):
    pass


class IncompleteAnnotationError(ComprError, ValueError):
    def __init__(self, attributes):
        self.attributes = list(attributes)
        super().__init__("missing required answers for attributes: %s" % ", ".join(map(str, self.attributes)))


class ParseError(ComprError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = "line %d: %s" % (line, message)
        super().__init__(message)


class VersionError(ComprError, ValueError):
    pass
