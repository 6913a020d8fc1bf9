"""Exception hierarchy shared by every module."""

from __future__ import annotations


class ChangeInferError(Exception):
    """Base class. ``category`` is printed by the CLI as ``error[<category>]``."""

    category = "error"


class ShapeError(ChangeInferError, ValueError):
    """Input rejected because of mismatched or invalid dimensions."""

    category = "shape"


class ConfigError(ChangeInferError, ValueError):
    """Inconsistent layer/network configuration (policies, thresholds, ...)."""

    category = "config"


class CalibrationError(ChangeInferError, RuntimeError):
    category = "calibration"


class FormatError(ChangeInferError, ValueError):
    """A file could not be parsed. Carries the file path and byte offset."""

    category = "parse"

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        self.message = message
        where = self.path if offset is None else f"{self.path}@{offset}"
        super().__init__(f"{where}: {message}")
