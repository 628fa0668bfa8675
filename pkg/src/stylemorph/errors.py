"""Exception types shared across the pipeline."""


class ParameterError(ValueError):
    """Invalid argument shapes, dimensions, or values."""


class DegenerateTriangleError(ParameterError):
    """A face has a zero-length edge."""

    def __init__(self, face_index: int, message: str | None = None):
        self.face_index = face_index
        super().__init__(message or f"degenerate triangle at face {face_index}")


class ProjectionError(ParameterError):
    """Points at or behind the camera plane."""

    def __init__(self, indices, message: str | None = None):
        self.indices = list(indices)
        super().__init__(message or f"points at/behind camera plane: {self.indices}")


class RenderFaultError(RuntimeError):
    """Rasterization produced no foreground coverage."""


class TrainingFaultError(RuntimeError):
    """Non-finite value encountered during training."""

    def __init__(self, message: str, step: int | None = None, batch_index: int | None = None):
        self.step = step
        self.batch_index = batch_index
        super().__init__(message)


class LandmarkError(RuntimeError):
    """Landmark provider failed for a sample."""

    def __init__(self, sample_id, message: str | None = None):
        self.sample_id = sample_id
        super().__init__(message or f"landmark detection failed for sample {sample_id}")


class FeatureError(RuntimeError):
    """Feature provider failed for a sample."""

    def __init__(self, sample_id=None, message: str | None = None):
        self.sample_id = sample_id
        super().__init__(message or f"feature extraction failed for sample {sample_id}")


class DataError(ValueError):
    """Malformed training data (bad labels, missing files)."""


class CheckpointError(RuntimeError):
    """Checkpoint load/save failure or version incompatibility."""
