"""Exception types. Each maps onto a CLI exit code."""


class MetaDrugError(Exception):
    exit_code = 4


class ConfigError(MetaDrugError, ValueError):
    """Invalid configuration or generator spec."""

    exit_code = 2


class DataError(MetaDrugError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class CohortParseError(DataError):
    def __init__(self, line_no, msg):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class SchemaError(DataError):
    """Input violates a declared schema or format version. Reported with
    the config/schema exit code even though it is raised on data."""

    exit_code = 2


class RetrievalError(MetaDrugError):
    """No peer candidates were available for a query."""


class TrainingError(MetaDrugError):
    pass
