"""Exception hierarchy shared by every flowvid module."""


class FlowvidError(Exception):
    """Base class for all errors raised by flowvid."""


class ShapeError(FlowvidError, ValueError):
    pass


class StateError(FlowvidError, RuntimeError):
    pass


class SchemaError(FlowvidError, ValueError):
    pass


class ParseError(FlowvidError, ValueError):
    def __init__(self, row, column, value):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r} as a number")


class EmptyDatasetError(FlowvidError, ValueError):
    pass


class InsufficientDataError(FlowvidError, ValueError):
    pass


class DataError(FlowvidError, ValueError):
    pass


class AuditError(FlowvidError, AssertionError):
    pass


class IntegrityError(FlowvidError, ValueError):
    pass


class VersionError(FlowvidError, ValueError):
    pass


class DivergenceError(FlowvidError, ArithmeticError):
    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")
