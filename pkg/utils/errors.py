"""
Errors - Exception hierarchy shared by every NPN module
Components raise these; the controller maps them to process exit codes
"""

from typing import Any, Dict, Optional


class NPNError(Exception):
    """Base class for all neural plasticity network errors"""


class ConfigurationError(NPNError, ValueError):
    """Invalid configuration or non-conforming shapes"""


class UsageError(NPNError, RuntimeError):
    """An operation was called outside of its contract"""


class ParseError(NPNError, ValueError):
    """A binary input (IDX file, checkpoint) could not be decoded"""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericFailure(NPNError, ArithmeticError):
    """Training produced a non-finite loss"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# Process exit codes used by main_controller
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECK_FAILED = 4
