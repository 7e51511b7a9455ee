"""
Error Types
Exception hierarchy shared by the reconstruction pipeline and the CLI
"""

from typing import Optional


class SplatFuseError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 1


class ConfigError(SplatFuseError, ValueError):
    """Invalid or unknown configuration"""

    exit_code = 2


class DataError(SplatFuseError, ValueError):
    """Problem with input data (files, manifests, views)"""

    exit_code = 3

    def __init__(self, message: str, frame_index: Optional[int] = None):
        self.frame_index = frame_index
        if frame_index is not None:
            message = f"frame {frame_index}: {message}"
        super().__init__(message)


class MissingFileError(DataError):
    """A referenced file does not exist"""

    def __init__(self, path: str, frame_index: Optional[int] = None):
        self.path = str(path)
        super().__init__(f"missing file '{self.path}'", frame_index)


class PoseError(DataError):
    """Malformed or non-invertible pose"""


class DepthUnitError(DataError):
    """Depth unit other than mm or m"""


class ViewMismatchError(DataError):
    """Requested or predicted views do not match the available ones"""


class GeometryError(SplatFuseError, ValueError):
    """A numerical precondition was violated (non-positive depth, bad shapes, ...)"""

    exit_code = 3


class DivergenceError(SplatFuseError, RuntimeError):
    """Fine-tuning loss blew up"""

    exit_code = 4
