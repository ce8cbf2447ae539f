"""
Error hierarchy
Every error names the item it concerns (video reference, block index, file, layer pair)
"""
from typing import Any, Dict, Optional


class VDIMError(Exception):
    """Base class for all errors raised by the vdim package"""


class ConfigurationError(VDIMError, ValueError):
    """Run configuration is invalid or inconsistent across sections"""


class DatasetError(VDIMError):
    """Dataset construction or decoding failed"""

    def __init__(self, message: str, reference: Optional[str] = None):
        self.reference = reference
        if reference is not None:
            message = f"[{reference}] {message}"
        super().__init__(message)


class ManifestError(DatasetError, ValueError):
    """A manifest line is malformed or points at an invalid item"""


class FrameDecodeError(DatasetError):
    """A frame of a video could not be read or decoded"""


class EmptyClipError(DatasetError, ValueError):
    """A clip with zero frames was passed where frames are required"""


class ViewPlanError(VDIMError, ValueError):
    """The requested view plan does not fit the available window"""

    def __init__(self, message: str, required_length: Optional[int] = None):
        self.required_length = required_length
        super().__init__(message)


class EncoderShapeError(VDIMError, ValueError):
    """Realized encoder shapes differ from the declared block shapes"""

    def __init__(self, message: str, block_index: Optional[int] = None):
        self.block_index = block_index
        super().__init__(message)


class ScoreError(VDIMError, ValueError):
    """Contrastive scores are missing, inconsistent or non-finite"""


class NonFiniteLossError(VDIMError, RuntimeError):
    """Training produced a non-finite loss; carries score statistics for diagnosis"""

    def __init__(self, message: str, step: int, diagnostics: Optional[Dict[str, Any]] = None):
        self.step = step
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class CheckpointError(VDIMError):
    """Checkpoint file is unreadable, corrupted or incompatible"""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path is not None:
            message = f"{message} ({path})"
        super().__init__(message)
