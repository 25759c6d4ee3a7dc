"""Exception types shared across the package."""

from __future__ import annotations


class FusedLMError(Exception):
    """Base class for package errors that are not numcore errors."""


class LengthError(FusedLMError, ValueError):
    pass


class VocabError(FusedLMError, ValueError):
    pass


class DomainError(FusedLMError, ValueError):
    pass


class AlignmentError(FusedLMError, ValueError):
    pass


class SamplerError(FusedLMError, ValueError):
    pass


class ConfigError(FusedLMError, ValueError):
    pass


class AnalysisError(FusedLMError, ValueError):
    pass


class CheckpointError(FusedLMError, IOError):
    pass


class TrainingError(FusedLMError, RuntimeError):
    """Loss became non-finite; ``step`` is the 0-based optimizer step."""

    def __init__(self, step: int, stage: str, loss: float) -> None:
        super().__init__(f"{stage}: non-finite loss {loss!r} at step {step}")
        self.step = step
        self.stage = stage
        self.loss = loss


class EngineStateError(FusedLMError, RuntimeError):
    pass


class EngineFailure(FusedLMError, RuntimeError):
    """An engine raised during orchestration; ``engine`` is its index."""

    def __init__(self, engine: int, name: str, cause: BaseException) -> None:
        super().__init__(f"engine {engine} ({name}) failed: {cause}")
        self.engine = engine
        self.name = name
