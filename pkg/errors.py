#!/usr/bin/env python3
"""
Exception hierarchy for the LSTR detector
Every error carries the name of the pipeline stage that raised it
"""

from typing import Optional


class LSTRError(Exception):
    """Base error; renders as '[module] message' when a module is known"""

    module = None

    def __init__(self, message: str, module: Optional[str] = None):
        super().__init__(message)
        self.message = message
        if module is not None:
            self.module = module

    def __str__(self):
        if self.module:
            return f"[{self.module}] {self.message}"
        return self.message


class DimensionError(LSTRError, ValueError):
    """Shapes of operands disagree"""


class NonFiniteError(LSTRError, ArithmeticError):
    """NaN or Inf produced or supplied"""


class LabelError(LSTRError, ValueError):
    """Class label outside 0..K-1"""


class ScheduleError(LSTRError, ValueError):
    """Invalid learning-rate schedule query"""


class GeometryError(LSTRError, ValueError):
    """Degenerate or malformed box/tubelet"""


class ClipFormatError(LSTRError, ValueError):
    """Clip file is not a valid LSTRCLP1 document"""


class ClipTruncatedError(ClipFormatError):
    """Clip payload size differs from the header declaration"""


class RecordFormatError(LSTRError, ValueError):
    """Malformed detection or ground-truth record line"""


class CheckpointError(LSTRError, ValueError):
    """Checkpoint file malformed or incompatible with the model"""


class ConfigError(LSTRError, ValueError):
    """Malformed or out-of-range configuration"""
