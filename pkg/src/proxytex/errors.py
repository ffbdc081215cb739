"""Exception types shared across the package."""


class ProxytexError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(ProxytexError):
    """An operation was called in a state its contract forbids."""


class ShapeMismatchError(ProxytexError, ValueError):
    """Array dimensions of two operands do not agree."""


class MissingImageError(ProxytexError, FileNotFoundError):
    """Image file does not exist."""


class MalformedImageError(ProxytexError, ValueError):
    """Image file exists but cannot be decoded."""


class NotRgbaError(ProxytexError, ValueError):
    """Decoded raster does not carry 4 channels."""


class BehindCameraError(ProxytexError, ValueError):
    """Point lies at or behind the camera plane (z <= 0)."""


class EmptyHullError(ProxytexError, ValueError):
    """Visual-hull carving left no occupied voxels."""


class DegenerateInputError(ProxytexError, ValueError):
    """Geometric input has no well-defined solution (e.g. collinear points)."""


class EmptyRegionError(ProxytexError, ValueError):
    """No hull surface voxels inside the requested region of interest."""


class ObjParseError(ProxytexError, ValueError):
    """OBJ file violates the supported v/vt/f subset."""


class EmptyMaskError(ProxytexError, ValueError):
    """Metric mask contains no pixels."""


class PerceptualUnavailableError(ProxytexError, RuntimeError):
    """Perceptual feature weights are not available."""


class CheckpointVersionError(ProxytexError, ValueError):
    """Checkpoint was written with an incompatible format version."""


class CheckpointCorruptError(ProxytexError, ValueError):
    """Checkpoint file cannot be deserialized."""


class TrainingDivergedError(ProxytexError, RuntimeError):
    """Loss became non-finite during optimization."""


class DatasetSchemaError(ProxytexError, ValueError):
    """On-disk dataset violates the manifest schema."""
