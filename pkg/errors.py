from enum import Enum
from typing import Optional


class PipelineError(Exception):
    """Base error for the lane-change pipeline. Maps to a CLI exit code."""

    exit_code = 3


class ConfigurationError(PipelineError):
    """Bad configuration, bad flags, or an incompatible stage pairing"""

    exit_code = 1


class DataError(PipelineError):
    """Missing or malformed input data"""

    exit_code = 2


class ParseError(DataError):
    """A CSV cell or row that could not be parsed"""

    def __init__(self, message: str, path: Optional[str] = None,
                 row: Optional[int] = None, column: Optional[str] = None):
        self.path = path
        self.row = row
        self.column = column
        location = []
        if path:
            location.append(str(path))
        if row is not None:
            location.append(f"row {row}")
        if column:
            location.append(f"column '{column}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class DropReason(str, Enum):
    """Reason codes for tracks, events and windows left out of the dataset"""

    FRAME_GAP = "frame_gap"
    MIXED_CARRIAGEWAY = "mixed_carriageway"
    NON_ADJACENT_LANES = "non_adjacent_lanes"
    TRUNCATED_START = "truncated_start"
    TRUNCATED_END = "truncated_end"
    INSUFFICIENT_HISTORY = "insufficient_history"
    LANE_NOT_CONSTANT = "lane_not_constant"
    INSUFFICIENT_LK_HISTORY = "insufficient_lk_history"
    MISSING_NEIGHBOR = "missing_neighbor"
    NEIGHBOR_LANE_MISMATCH = "neighbor_lane_mismatch"


class RejectedSample(DataError):
    """An event or window that does not qualify for the decision dataset"""

    def __init__(self, reason: DropReason, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)


class ModelError(PipelineError):
    """Training or inference failure"""

    exit_code = 3


class TrainingDiverged(ModelError):
    """Loss went non-finite; `state` holds the last good parameters"""

    def __init__(self, message: str, state=None):
        self.state = state
        super().__init__(message)
