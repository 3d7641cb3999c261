"""
Exception hierarchy for the workbench.

Every error carries the process exit code the CLI should return for it.
"""


class ReconUQError(Exception):
    exit_code = 5


class ConfigError(ReconUQError):
    exit_code = 2


class DataError(ReconUQError):
    exit_code = 3


class NumericError(ReconUQError):
    exit_code = 4


# grid
class ShapeMismatch(DataError):
    pass


class EmptyMask(DataError):
    pass


class PatchTooLarge(DataError):
    pass


class BadAxis(DataError):
    pass


# synth
class SpecInvalid(ConfigError):
    pass


class EmptyTarget(DataError):
    pass


# train
class NonFiniteGradient(NumericError):
    pass


class TooFewSamples(DataError):
    pass


class DuplicateSeed(ConfigError):
    pass


# uq
class NoReconBranch(ConfigError):
    pass


class BadDropProb(ConfigError):
    pass


class EmptyEnsemble(ConfigError):
    pass


# evaluate
class DegenerateVariance(NumericError):
    pass


class LengthMismatch(DataError):
    pass


class DegenerateID(NumericError):
    pass


class EmptyStructure(DataError):
    pass


class TooFew(DataError):
    pass


class IdMismatch(DataError):
    pass


class StageError(ReconUQError):
    """A pipeline stage failed; keeps the stage name and the original cause."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", ReconUQError.exit_code)
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
