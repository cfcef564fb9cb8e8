"""Exception types raised across the package."""


class IFSError(Exception):
    """Base class for all package errors."""


class ParameterCorruptionError(IFSError, ValueError):
    """A fractal code contains non-finite parameters."""


class DegenerateMatrixError(IFSError, ValueError):
    """Gram-Schmidt received zero or parallel columns."""


class ContractViolationError(IFSError, ValueError):
    """A map handed to the chaos game is not contractive."""


class ReplayMismatchError(IFSError, ValueError):
    """A trajectory tape does not replay under the given maps."""


class GeometryMismatchError(IFSError, ValueError):
    """Backward pass geometry differs from the forward pass."""


class ZeroMassError(IFSError, ValueError):
    """Image moments requested for an image with no intensity."""


class PerceptualPluginError(IFSError, RuntimeError):
    """The registered perceptual loss plugin failed."""


class DivergenceError(IFSError, RuntimeError):
    """The optimisation produced a non-finite loss.

    ``dump`` holds the parameters, iteration and seed at the failure point.
    """

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class CodecError(IFSError, ValueError):
    """A fractal-code document could not be parsed."""


class CodecVersionError(CodecError):
    """A fractal-code document declares an unsupported format version."""


class SuiteGenerationError(IFSError, RuntimeError):
    """Too many consecutive rejections while sampling random test fractals."""
