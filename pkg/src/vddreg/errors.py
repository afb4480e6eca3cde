"""Exception hierarchy shared across the package."""


class VddRegError(Exception):
    """Base class for all package errors."""


class DimensionError(VddRegError, ValueError):
    """An image or array has dimensions the operation cannot accept."""


class DegenerateSampleError(VddRegError, ValueError):
    """A point sample cannot determine a transform (e.g. coincident points)."""


class DatasetError(VddRegError):
    """A dataset directory or annotation file is missing or malformed."""


class WeightsError(VddRegError):
    """A weights file is missing or does not match the expected layout."""


class TrainingError(VddRegError):
    """Training cannot proceed with the given inputs."""


class RegistrationFailure(VddRegError):
    """Registration did not produce a usable transform.

    ``stage`` names the pipeline step that failed (``segment``, ``detect``,
    ``match`` or ``ransac``).
    """

    def __init__(self, message: str, stage: str = "ransac"):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
