"""Shared exception types."""

from __future__ import annotations


class FedselError(Exception):
    """Base class for all fedsel errors."""


class ConfigError(FedselError, ValueError):
    """Invalid configuration value or combination of values."""


class IdxFormatError(FedselError, ValueError):
    """Malformed IDX file; the message names the offending byte offset."""


class NonFiniteLossError(FedselError, RuntimeError):
    """Training aborted because the global loss became non-finite.

    Carries the partially completed round records so callers can persist
    them before exiting.
    """

    def __init__(self, message: str, round_index: int = 0, records: list | None = None):
        super().__init__(message)
        self.round_index = round_index
        self.records = records if records is not None else []
