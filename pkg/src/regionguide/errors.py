"""Exception hierarchy shared by every stage of the pipeline."""


class RegionGuideError(Exception):
    """Base class for all package errors."""


class DimensionError(RegionGuideError, ValueError):
    """Array shapes or resolutions do not line up."""


class NumericError(RegionGuideError, ValueError):
    """Input contains NaN or infinite entries."""


class PreconditionError(RegionGuideError, ValueError):
    """A value violates a type-level invariant."""


class DegenerateMaskError(RegionGuideError, ValueError):
    """Renormalization would divide by zero."""


class ResampleError(RegionGuideError, ValueError):
    """Mask resampling request cannot be satisfied."""


class ConfigError(RegionGuideError, ValueError):
    """Inconsistent configuration, layout or manifest."""


class SelectorError(RegionGuideError, KeyError):
    """Unknown tag, token or step selector."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class EmptyRegionError(RegionGuideError, ValueError):
    """A region metric was requested over zero pixels or zero windows."""


class SizeError(RegionGuideError, ValueError):
    """Image is too small for the requested operation."""


class ComparisonError(RegionGuideError, ValueError):
    """Two run directories cannot be compared."""


class NumericDivergenceError(RegionGuideError, ArithmeticError):
    """The sampler produced a non-finite latent."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite latent after sampler step {step}")
