"""Exception hierarchy; each class carries the CLI exit code it maps to."""
from __future__ import annotations


class ConformalRagError(Exception):
    exit_code = 3


class ConfigError(ConformalRagError):
    """Invalid configuration, flags, or usage."""

    exit_code = 2


class DataError(ConformalRagError):
    """Bad input data: corrupt files, empty corpora, unlabeled calibration sets."""

    exit_code = 3


class ContractError(DataError):
    """Two artifacts that must agree do not (embedder ids, dims, thresholds)."""


class ProviderError(ConformalRagError):
    """A remote provider failed or broke its response contract."""

    exit_code = 4

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class RetryableProviderError(ProviderError):
    """Transport failure that survived every retry attempt."""


class GenerationError(ProviderError):
    """Chat provider failure during answering; carries the prompt for re-submission."""

    def __init__(self, message: str, prompt, attempts: int = 0):
        super().__init__(message, attempts)
        self.prompt = prompt
