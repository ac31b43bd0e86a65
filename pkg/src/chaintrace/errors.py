"""Exception types shared across the toolkit.

Every error carries a short machine-readable ``code`` so callers (and the CLI)
can branch on the failure kind without parsing messages.
"""

from __future__ import annotations


class ChainTraceError(Exception):
    """Base class for all toolkit errors."""

    code = "ERROR"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self) -> str:
        return f"[{self.code}] {super().__str__()}"


class InputError(ChainTraceError, ValueError):
    """Bad input data: malformed files, unknown chains, bad parameters."""

    code = "INPUT"


class LedgerError(InputError):
    """Raised while parsing or validating a ledger file."""

    code = "MALFORMED_RECORD"

    def __init__(self, message: str, code: str | None = None, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, code)
        self.line = line


class TagConflict(InputError):
    code = "TAG_CONFLICT"


class TraceError(InputError):
    """Cross-chain tracing failures (missing chain, ambiguous match, ...)."""

    code = "TRACE"


class MatrixError(InputError):
    """Rejected call on the pyramid-contract simulator."""

    code = "MATRIX"


class InvariantViolation(ChainTraceError, AssertionError):
    """An internal invariant failed. Always a bug or corrupted state."""

    code = "INVARIANT"
