"""Exception hierarchy shared by every stage of the pipeline.

Each error carries the process exit code the CLI reports for it.
"""


class PipelineError(Exception):
    exit_code = 4


class ConfigError(PipelineError):
    exit_code = 2


class PrerequisiteError(PipelineError):
    exit_code = 3


class NumericError(PipelineError):
    exit_code = 4


# numcore
class ShapeMismatch(NumericError, ValueError):
    pass


class EmptyRow(NumericError, ValueError):
    pass


class NotScalar(NumericError, ValueError):
    pass


class NonFiniteError(NumericError, FloatingPointError):
    pass


class NonFiniteProbe(NonFiniteError):
    pass


# radarsim
class NyquistViolation(NumericError, ValueError):
    pass


class ZeroMagnitudeSample(NumericError, ValueError):
    pass


class ZeroEnergyInput(NumericError, ValueError):
    pass


# features
class TooShort(NumericError, ValueError):
    pass


class WrongSampleRate(NumericError, ValueError):
    pass


# corpus
class UnknownToken(ConfigError, KeyError):
    pass


# model
class LimitOutOfRange(NumericError, IndexError):
    pass


class PathLabelMismatch(NumericError, ValueError):
    pass


class ConfigMismatch(ConfigError, ValueError):
    pass


# training
class InfeasibleLength(NumericError, ValueError):
    pass


class NonFiniteComponent(NonFiniteError):
    pass


class MissingPrerequisite(PrerequisiteError, FileNotFoundError):
    pass


# decoding / metrics
class EmptyEncoderStream(NumericError, ValueError):
    pass


class EmptyReference(NumericError, ValueError):
    pass


# persistence
class CorruptHeader(PrerequisiteError, ValueError):
    pass


class ShapeDirectoryMismatch(PrerequisiteError, ValueError):
    pass
