"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class HacoError(Exception):
    """Base class for all errors raised by this package."""


class MissingRequiredColumn(HacoError):
    def __init__(self, name: str) -> None:
        super().__init__(f"required column missing after sanitization: {name!r}")
        self.name = name


class EmptyDataset(HacoError):
    pass


class InsufficientEpisodes(HacoError):
    pass


class InvalidConfig(HacoError):
    pass


class DegenerateLabels(HacoError):
    pass


class DidNotConverge(HacoError):
    def __init__(self, message: str, grad_norm: float) -> None:
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


class FeatureMismatch(HacoError):
    pass


class EmptyCalibration(HacoError):
    pass


class InvalidAlpha(HacoError):
    pass


class EmptySafeSet(HacoError):
    pass


class SingleActionSafeSet(HacoError):
    pass


class InsufficientData(HacoError):
    pass


class ZeroVariance(HacoError):
    pass


class TooFewSamples(HacoError):
    pass


class NoDemographics(HacoError):
    pass


class MissingStageOutput(HacoError):
    pass


class StageError(HacoError):
    """Wraps a failure inside a pipeline stage, keeping the stage name."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
