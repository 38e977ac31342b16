"""
Exception hierarchy shared by every module.

Each error carries a machine-readable ``code`` alongside its message so the
command line can emit the same ``{"error": {...}}`` payload for every failure.
"""

from typing import Any, Dict, Optional


class FrameworkError(Exception):
    code = "FRAMEWORK_ERROR"

    def __init__(self, message: str, details: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_payload(self) -> Dict[str, Any]:
        return {
            "error": {
                "code": self.code,
                "message": self.message,
                "details": self.details,
            }
        }


class ConfigError(FrameworkError, ValueError):
    code = "CONFIG_ERROR"


class ScheduleError(FrameworkError, ValueError):
    code = "SCHEDULE_ERROR"


class ControllerError(FrameworkError, ValueError):
    code = "CONTROLLER_ERROR"


class ShapeError(FrameworkError, ValueError):
    code = "SHAPE_ERROR"


class MetricError(FrameworkError, ValueError):
    code = "METRIC_ERROR"


class DatasetError(FrameworkError):
    code = "DATASET_ERROR"


class CheckpointError(FrameworkError):
    code = "CHECKPOINT_ERROR"


class NonFiniteLossError(FrameworkError):
    """Raised when a training loss is NaN/inf; ``snapshot`` holds the step state."""

    code = "NON_FINITE_LOSS"

    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        super().__init__(message, details=str(snapshot) if snapshot else None)
        self.snapshot = snapshot or {}
