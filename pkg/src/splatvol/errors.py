"""Exception types shared across the toolkit."""


class SplatvolError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SplatvolError, ValueError):
    """Invalid configuration value (resolution, schedule, weights, ...)."""


class ShapeError(SplatvolError, ValueError):
    """Array arguments have mismatched or invalid shapes."""


class DegenerateRotationError(SplatvolError, ValueError):
    """A stored quaternion has (near-)zero norm and cannot be normalized."""


class RenderError(SplatvolError, RuntimeError):
    """Rendering failed, e.g. non-finite attributes on an active Gaussian."""


class RenderStateError(SplatvolError, ValueError):
    """Backward pass inputs do not match the forward configuration."""


class OptimizerError(SplatvolError, RuntimeError):
    """Optimizer step received invalid gradients."""


class ContractError(SplatvolError, ValueError):
    """A caller violated an operation precondition."""


class FitDivergedError(SplatvolError, RuntimeError):
    """Fitting hit a non-finite loss; carries a snapshot of the state."""

    def __init__(self, message: str, iteration: int, snapshot=None):
        super().__init__(message)
        self.iteration = iteration
        self.snapshot = snapshot


class EmptyGeometryError(SplatvolError, ValueError):
    """No Gaussian passes the opacity floor; distance field is undefined."""


class DenoiserContractError(SplatvolError, ValueError):
    """A denoiser returned an output violating the shape contract."""


class DatasetError(SplatvolError, ValueError):
    """Dataset manifest missing, malformed, or referencing bad images."""


class VolumeFormatError(SplatvolError, ValueError):
    """Base class for binary volume / distance-field file errors."""


class BadMagicError(VolumeFormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(VolumeFormatError):
    """File uses an unsupported format version."""


class TruncatedFileError(VolumeFormatError):
    """File ends before the payload announced in the header."""
