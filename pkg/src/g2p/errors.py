"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps each category to a distinct exit code.
"""


class G2PError(Exception):
    exit_code = 1


class ConfigError(G2PError, ValueError):
    exit_code = 2


class DataError(G2PError, ValueError):
    exit_code = 3


class ParseError(DataError):
    """A malformed input row; carries the file, line and column when known."""

    def __init__(self, message, path=None, line=None, column=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = ":".join(where[:1]) + (" " + ", ".join(where[1:]) if len(where) > 1 else "")
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.column = column


class NumericError(G2PError, ArithmeticError):
    exit_code = 4
