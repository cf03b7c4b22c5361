"""Exception hierarchy. The CLI maps each family to an exit code."""


class FusionKanError(Exception):
    exit_code = 3


class ArgumentError(FusionKanError, ValueError):
    exit_code = 1


class StructuralError(FusionKanError):
    """Malformed computation graph."""


class NumericalError(FusionKanError, ArithmeticError):
    exit_code = 3


class TrainingError(NumericalError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DataError(FusionKanError, ValueError):
    """Bad input file contents. Carries row/column when known."""

    exit_code = 2

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


class CheckpointError(DataError):
    pass
