"""
Exception hierarchy for attnlens.

Every error derives from both AttnLensError and ValueError, so callers can
catch either the package root or the builtin they would expect for bad input.
"""

from typing import Optional


class AttnLensError(ValueError):
    """Root of all attnlens errors."""


class DimensionError(AttnLensError):
    """Operand shapes are incompatible."""


class ContractError(AttnLensError):
    """A precondition of an operation was violated."""


class NonFiniteError(ContractError):
    """An operation would have produced NaN or Inf."""


class ConfigError(AttnLensError):
    """Model or run configuration is invalid."""


class WeightError(AttnLensError):
    """Weights are missing, unknown, or have the wrong shape."""


class UnsupportedVariantError(AttnLensError):
    """The operation is not defined for this model variant."""


class FormatError(AttnLensError):
    """
    A file does not follow its declared layout.

    Args:
        message: Human-readable description
        position: Byte offset in the file where the problem was detected
        tensor: Name of the offending tensor, if any
    """

    def __init__(self, message: str, position: Optional[int] = None, tensor: Optional[str] = None):
        self.position = position
        self.tensor = tensor
        parts = [message]
        if tensor is not None:
            parts.append(f"tensor '{tensor}'")
        if position is not None:
            parts.append(f"at byte {position}")
        super().__init__(", ".join(parts))
