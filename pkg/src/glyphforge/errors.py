"""Exception hierarchy.

Three families map onto the CLI exit codes: validation problems (2),
I/O problems (3) and numerical failures (4).
"""
from __future__ import annotations


class GlyphForgeError(Exception):
    exit_code = 1


class ValidationError(GlyphForgeError, ValueError):
    exit_code = 2


class DataIOError(GlyphForgeError, OSError):
    exit_code = 3


class NumericalError(GlyphForgeError, ArithmeticError):
    exit_code = 4


# dataset
class InvalidCanvas(ValidationError):
    pass


class MissingGlyph(ValidationError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class EmptyIntersection(ValidationError):
    pass


# diffusion core / denoiser
class InvalidRange(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class NoiseAtFinalStep(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


class WeightSumError(ValidationError):
    pass


# training
class NonFiniteLoss(NumericalError):
    pass


class FingerprintMismatch(ValidationError):
    pass


class CheckpointFormatError(ValidationError):
    pass


# sampling / eval / vectorizer
class InvalidSteps(ValidationError):
    pass


class RaggedRows(ValidationError):
    pass


class DegenerateContour(ValidationError):
    pass
