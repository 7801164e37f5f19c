class SplatSdfError(RuntimeError):
    """Base class for errors raised by the reconstruction pipeline."""


class ConfigError(SplatSdfError, ValueError):
    """Malformed configuration file or unknown configuration key."""


class DatasetError(SplatSdfError):
    """A dataset directory is missing files or contains malformed data."""


class CheckpointError(SplatSdfError):
    """A checkpoint container could not be read or written."""


class EmptySceneError(SplatSdfError):
    """An operation would leave (or requires) a scene with no splats."""


class NonFiniteError(SplatSdfError):
    """A loss term, gradient or parameter became NaN or infinite.

    Parameters
    ----------
    message : str
        Description of the failure.
    where : str, optional
        Name of the op, loss term or parameter that went non-finite.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class StageError(SplatSdfError):
    """A pipeline stage failed; ``stage`` names it for the CLI diagnostic."""

    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message
