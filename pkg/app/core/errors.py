# app/core/errors.py

class WorkbenchError(Exception):
    """Base class for every error the workbench raises on purpose."""
    exit_code = 1


class ConfigError(WorkbenchError):
    exit_code = 2

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class InvalidValueError(WorkbenchError, ValueError):
    exit_code = 2


class CycleParseError(InvalidValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class CycleFormatError(InvalidValueError):
    pass


class InfeasibleError(WorkbenchError):
    exit_code = 3

    def __init__(self, message: str, time_index: int | None = None):
        self.time_index = time_index
        super().__init__(message if time_index is None else f"{message} (first stranded time index {time_index})")


class NumericError(WorkbenchError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, dump_path: str | None = None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message}; offending batch dumped to {dump_path}")


class ShapeError(WorkbenchError, ValueError):
    pass


class UsageError(WorkbenchError, RuntimeError):
    pass


class PreconditionError(WorkbenchError, ValueError):
    pass


class ContractViolation(WorkbenchError, AssertionError):
    pass
