"""Error hierarchy shared by the library and the batch CLI.

Each class carries the process exit code the CLI reports for it, so the
mapping lives in one place.
"""

from __future__ import annotations

from typing import Any


class WivJMError(Exception):
    exit_code = 1


class ConfigError(WivJMError):
    exit_code = 2


class DataError(WivJMError):
    exit_code = 3


class ConvergenceWarning(WivJMError):
    """Raised after outputs are written when key parameters failed R-hat."""

    exit_code = 4

    def __init__(self, message: str, flagged: list[str] | None = None):
        super().__init__(message)
        self.flagged = flagged or []


class NumericError(WivJMError):
    exit_code = 5


class FitFailure(NumericError):
    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DomainError(WivJMError, ValueError):
    exit_code = 5
