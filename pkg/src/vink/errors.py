"""Exception types shared across the pipeline.

Every operational failure raises a subclass of :class:`VinkError` so the CLI
and the HTTP service can map them to exit codes / status codes uniformly.
"""


class VinkError(Exception):
    """Base class for all package errors."""


# --- raster ingestion / synthesis ---

class DecodeError(VinkError):
    """File exists but does not decode as an 8-bit RGB raster."""


class InvalidFactor(VinkError):
    """Downsample factor < 1 or larger than the image."""


class InvalidSpec(VinkError):
    """Synthetic slide spec violates its invariants."""


# --- tiling ---

class InvalidOverlap(VinkError):
    """Region overlap fraction outside [0, 1)."""


class InvalidRegionSide(VinkError):
    """Region side is not the patch grid size (16 x 256)."""


# --- edge refinement ---

class InvalidSigma(VinkError):
    """Non-positive Gaussian sigma."""


class EmptyRoi(VinkError):
    """ROI rasterizes to zero pixels inside the image."""


class NoEdgeFound(VinkError):
    """All masked gradients are equal; thresholding is degenerate."""


class DegenerateHistogram(VinkError):
    """All values fall into a single histogram bin."""


# --- binary file formats ---

class BadMagic(VinkError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(VinkError):
    """File format version is not supported."""


class TruncatedFile(VinkError):
    """File ends before the declared payload."""


class DimensionMismatch(VinkError):
    """Vector length disagrees with the declared dimension."""


class DuplicateRecord(VinkError):
    """Two records share the same (region_id, grid_pos)."""


# --- classifier ---

class NonFiniteInput(VinkError):
    """Loss evaluated on a non-finite logit."""


class SingleClassData(VinkError):
    """Training data contains only one class."""


class EmptyTrainingSet(VinkError):
    """No usable training records (or no epochs to run)."""


# --- aggregation / metrics ---

class WrongPatchCount(VinkError):
    """A region vote needs exactly 256 patch entries."""


class GeometryMismatch(VinkError):
    """Overlay base image does not match the slide's downsampled geometry."""


class MisalignedRegions(VinkError):
    """Prediction/truth lists do not line up by region_id."""


class EmptyMatrix(VinkError):
    """Metric requested on a confusion matrix with zero total."""


class NoPositives(VinkError):
    """FNR requested with TP + FN = 0."""


# --- annotation service ---

class DataRootMissing(VinkError):
    """Configured data root does not exist."""


class UnknownSlide(VinkError):
    """No manifest for the requested slide id."""


class BadWindow(VinkError):
    """View window malformed or not intersecting the slide."""


class LevelForbiddenInReview(VinkError):
    """Review mode only serves the 16x working scale."""


class VersionConflict(VinkError):
    """Optimistic write with a stale expected_version."""


class ValidationError(VinkError):
    """Annotation payload has an unknown class or an empty polyline."""


class NoInferenceResults(VinkError):
    """Overlay requested before region decisions exist."""
