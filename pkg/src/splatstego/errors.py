"""Exception types raised across the package."""


class InvalidParameterError(ValueError):
    """A numeric input is non-finite, out of range or otherwise unusable."""


class ShapeMismatchError(ValueError):
    pass


class AuxMismatchError(ValueError):
    """Backward pass was handed render state from a different forward call."""


class MissingCacheError(RuntimeError):
    pass


class PlyError(ValueError):
    pass


class PlyHeaderError(PlyError):
    pass


class PlyPropertyMismatchError(PlyError):
    pass


class PlyTruncatedError(PlyError):
    pass


class ManifestError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class TrainingAbort(RuntimeError):
    """Raised when the loss goes non-finite; carries where it happened."""

    def __init__(self, iteration, view, term, value):
        self.iteration = iteration
        self.view = view
        self.term = term
        self.value = value
        super().__init__(
            f"non-finite loss at iteration {iteration} (view {view}): {term}={value}"
        )
