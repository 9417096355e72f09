class MKGCError(Exception):
    """Base class for errors raised by this package."""


class InputDataError(MKGCError, ValueError):
    """Malformed or inconsistent input data (files, pairs, triples)."""


class DuplicatePairError(InputDataError):
    pass


class NumericError(MKGCError, ArithmeticError):
    """Non-finite values or undefined numeric operations."""


class ShapeError(NumericError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class UsageError(MKGCError):
    """Bad command-line usage or configuration."""
