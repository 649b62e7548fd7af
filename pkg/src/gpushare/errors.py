"""Exception hierarchy shared by the whole package.

Two top-level families matter for the CLI: ConfigError covers bad input
(malformed traces, impossible options, mismatched reports) and maps to
exit code 2; ContractViolation covers internal API misuse (stale
placement plans, releasing unknown tasks) and maps to exit code 3.
"""


class GpuShareError(Exception):
    pass


class ConfigError(GpuShareError):
    """Bad user input: trace, workload, catalog, or CLI options."""

    exit_code = 2


class ContractViolation(GpuShareError):
    """An operation was called in a state its contract forbids."""

    exit_code = 3


class TraceError(ConfigError):
    """Base for trace-language diagnostics; carries a 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TraceSyntaxError(TraceError):
    pass


class UnknownSymbolError(TraceError):
    pass


class UnresolvedLabelError(TraceError):
    pass


class UnresolvedFunctionError(TraceError):
    pass


class ThreadLimitError(TraceError):
    pass


class RecursiveCallError(TraceError):
    pass


class UnreachableBlockError(TraceError):
    pass


class MultipleExitError(TraceError):
    pass


class AnalysisError(ConfigError):
    """Task construction failed (undeclared launch arg, byte overflow)."""


class LazyBindingError(ContractViolation):
    """Lazy runtime was driven outside its protocol."""
