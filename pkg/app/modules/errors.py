"""Error hierarchy shared by every XferLab module.

Each error carries a ``category`` (printed by the CLI) and an ``exit_code``
so the command-line surface can report failures without inspecting messages.
"""

from __future__ import annotations

from typing import Optional


class XferLabError(Exception):
    """Base class for all expected failures."""

    category = "internal"
    exit_code = 1


class RejectedInputError(XferLabError, ValueError):
    """Shape mismatch, unknown tap, label out of range, values out of [0, 1]."""

    category = "rejected-input"
    exit_code = 2


class WeightFormatError(XferLabError):
    """Malformed binary artifact (weights, datasets, trajectories, guides)."""

    category = "format"
    exit_code = 3

    def __init__(self, message: str, position: Optional[int] = None):
        if position is not None:
            message = f"{message} (at byte {position})"
        super().__init__(message)
        self.position = position


class TrainingFailureError(XferLabError):
    category = "training-failure"
    exit_code = 4


class UnderTrainedError(XferLabError):
    category = "under-trained"
    exit_code = 5

    def __init__(self, message: str, accuracy: float, floor: float):
        super().__init__(message)
        self.accuracy = accuracy
        self.floor = floor


class AttackFailureError(XferLabError):
    category = "attack-failure"
    exit_code = 6


class DegenerateTrajectoryError(XferLabError):
    category = "degenerate-trajectory"
    exit_code = 7


class DegenerateGuideError(XferLabError):
    category = "degenerate-guide"
    exit_code = 7


class RegressionError(XferLabError):
    """Non-finite regression inputs or a failed SPD factorization."""

    category = "regression"
    exit_code = 8


class ConfigError(XferLabError):
    category = "config"
    exit_code = 9

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PrerequisiteError(XferLabError):
    """A subcommand was run before the artifacts it consumes exist."""

    category = "prerequisite"
    exit_code = 10


class IOFailureError(XferLabError):
    """The filesystem refused a read or write (permissions, a file where a directory is expected)."""

    category = "io"
    exit_code = 11
