"""Exception hierarchy shared across the package."""


class CpcAdError(Exception):
    """Base class for all package errors."""


class ConfigError(CpcAdError):
    """Invalid or inconsistent configuration values."""


class GeometryError(CpcAdError):
    """Grid geometry that does not tile the image, or out-of-range indices."""


class ShapeError(CpcAdError):
    """Array dimensions do not match what an operation requires."""


class DatasetLayoutError(CpcAdError):
    """Dataset directory does not follow the MVTec-AD layout."""


class MissingMaskError(CpcAdError):
    """An anomalous test image has no ground-truth mask."""


class ImageDecodeError(CpcAdError):
    """An image file exists but cannot be decoded."""


class SamplingError(CpcAdError):
    """Not enough candidates to draw the requested negatives."""


class DivergenceError(CpcAdError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointVersionError(CpcAdError):
    """Checkpoint bundle carries an unsupported schema version."""


class CheckpointFormatError(CpcAdError):
    """Checkpoint bundle is corrupt or truncated."""


class BankTooSmallError(CpcAdError):
    """Negative bank pool is smaller than the requested negative count."""


class BankHygieneError(CpcAdError):
    """A non-training (or non-normal) sample reached the negative bank."""


class EmptyScoreMapError(CpcAdError):
    """ScoreMap has no present positions to aggregate."""


class DegenerateLabelsError(CpcAdError):
    """AUROC needs at least one positive and one negative label."""
