"""Exception hierarchy shared across the package."""


class Macro2MicroError(Exception):
    """Base class; ``code`` is what the CLI puts in its error record."""

    code = "error"


class MissingFile(Macro2MicroError, FileNotFoundError):
    code = "missing_file"


class MalformedVolume(Macro2MicroError, ValueError):
    code = "malformed_volume"


class AllNonFinite(Macro2MicroError, ValueError):
    code = "all_non_finite"


class IndexOutOfRange(Macro2MicroError, IndexError):
    code = "index_out_of_range"


class OddSpatialDims(Macro2MicroError, ValueError):
    code = "odd_spatial_dims"


class ShapeMismatch(Macro2MicroError, ValueError):
    code = "shape_mismatch"


class EmptyReferenceSet(Macro2MicroError, ValueError):
    code = "empty_reference_set"


class VersionMismatch(Macro2MicroError, ValueError):
    code = "version_mismatch"


class MalformedCheckpoint(Macro2MicroError, ValueError):
    code = "malformed_checkpoint"


class ExtractorUnavailable(Macro2MicroError, RuntimeError):
    code = "extractor_unavailable"


class NonFiniteComponent(Macro2MicroError, ValueError):
    code = "non_finite_component"


class NonFiniteLoss(Macro2MicroError, FloatingPointError):
    code = "non_finite_loss"

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class EmptyDataset(Macro2MicroError, ValueError):
    code = "empty_dataset"


class EmptyMask(Macro2MicroError, ValueError):
    code = "empty_mask"


class DegenerateData(Macro2MicroError, ValueError):
    code = "degenerate_data"


class DegenerateLabels(Macro2MicroError, ValueError):
    code = "degenerate_labels"


class ConfigInvalid(Macro2MicroError, ValueError):
    code = "config_invalid"
