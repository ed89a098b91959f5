"""Exception hierarchy shared by all modules."""


class DebiasError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(DebiasError, ValueError):
    pass


class DegenerateBiasError(DebiasError):
    """The bias subspace is empty (all probe weights are zero)."""


class DegenerateTargetError(DebiasError):
    """A probe target has fewer than two distinct classes."""


class ParseError(DebiasError):
    """Base for dataset file errors. ``line`` is 1-based."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message}, {', '.join(where)}" if where else message)


class RowCountMismatchError(ParseError):
    pass


class ValueOutOfRangeError(ParseError):
    pass


class UnknownAttributeError(ParseError):
    pass


class NonBinaryLabelError(ParseError):
    pass


class MalformedRowError(ParseError):
    pass


class SplitError(DebiasError, ValueError):
    pass


class UnknownGroupAttributeError(DebiasError, ValueError):
    pass


class NoIncludedGroupsError(DebiasError):
    """Every group was excluded from a violation average."""


class SelectionError(DebiasError):
    pass


class DivergenceError(DebiasError):
    def __init__(self, message, iteration):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")


class UnconstrainedFallbackError(DebiasError):
    """No constraint survives the positive-example filter."""
