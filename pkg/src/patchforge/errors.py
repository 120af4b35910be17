"""Exception hierarchy shared by every patchforge module."""


class PatchforgeError(Exception):
    """Base class for all library errors."""


class ConfigurationError(PatchforgeError):
    """Bad shapes, unknown keys, or invalid parameter values."""


class InputError(PatchforgeError, ValueError):
    """A caller passed data that violates an operation's precondition."""


class RangeError(InputError):
    """A timestep or step count falls outside the noise schedule."""


class BackendFault(PatchforgeError):
    """The diffusion backend produced non-finite output."""


class CapabilityError(PatchforgeError):
    """The requested feature is not provided by the configured component."""


class DetectionError(PatchforgeError):
    """No face could be found in an image."""


class MapIntegrityError(PatchforgeError):
    """A UV map carries coordinates outside the unit square at a valid texel."""


class TransportError(PatchforgeError):
    """The recognition oracle could not be reached."""


class ProtocolError(PatchforgeError):
    """The recognition oracle answered with a malformed payload."""


class EnsembleError(PatchforgeError):
    """One member of an oracle ensemble failed."""

    def __init__(self, member: str, cause: Exception):
        super().__init__(f"ensemble member {member!r} failed: {cause}")
        self.member = member
        self.cause = cause


class CalibrationError(PatchforgeError):
    """Threshold calibration needs both positive and negative pairs."""


class DatasetError(PatchforgeError):
    """The dataset layout cannot satisfy the sampling request."""
