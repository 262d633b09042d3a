"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file (volume, manifest, checkpoint) does not match its declared format."""


class DivergenceError(RuntimeError):
    """Training aborted because the loss became non-finite or ran away."""


class DegenerateLabelsError(ValueError):
    """An operation required positive label voxels but none exist."""
