"""Exception hierarchy shared by the library and the CLI.

The CLI maps each family to a process exit code: configuration problems
exit with 2, data problems with 3, and everything else with 4.
"""


class FedGruError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 4


class ConfigError(FedGruError):
    """An out-of-domain or unknown configuration value."""

    exit_code = 2

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class DataError(FedGruError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(FedGruError):
    """Training produced non-finite values."""


class AggregationError(FedGruError):
    pass
