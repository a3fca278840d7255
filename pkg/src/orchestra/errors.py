"""Exception hierarchy shared by every module."""


class OrchestraError(Exception):
    """Base class for all package errors."""


class ConfigError(OrchestraError, ValueError):
    """Invalid configuration (role counts, run config, workload spec)."""


class TraceError(OrchestraError, ValueError):
    """Base class for trace ingestion failures."""


class ParseError(TraceError):
    """A trace row could not be parsed."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ValidationError(TraceError):
    """A parsed value violates a domain constraint."""


class OrderingError(TraceError):
    """Lifecycle events arrive in an impossible order."""


class UnknownIdError(OrchestraError, KeyError):
    """Lookup of a machine, task or agent id that does not exist."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown id"


class ContractViolation(OrchestraError, RuntimeError):
    """A caller broke an operation's precondition."""


class NumericalError(OrchestraError, FloatingPointError):
    """Non-finite values reached an optimizer or loss."""
