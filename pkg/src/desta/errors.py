"""Shared exception hierarchy.

Every domain failure raised by this package derives from DestaError so the
CLI can map it to exit code 1 without enumerating modules.
"""


class DestaError(Exception):
    """Base class for all domain errors raised by this package."""


class LineError(DestaError):
    """A domain error tied to a specific 1-based line of an input file."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
