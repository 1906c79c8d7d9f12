"""Exception hierarchy shared by all rescreen modules."""


class RescreenError(Exception):
    """Base class for all rescreen errors."""


# --- raster I/O and arithmetic ---

class UnsupportedEncoding(RescreenError):
    """Input file uses a bit depth, compression or layout we refuse to decode."""


class MissingPpi(RescreenError):
    """No resolution metadata in the file and no override supplied."""


class CorruptFile(RescreenError):
    pass


class BadWeights(RescreenError):
    """Channel-mix weights negative or not summing to 1."""


class BadGamma(RescreenError):
    pass


class BadFloor(RescreenError):
    pass


# --- screen model ---

class UnknownProcess(RescreenError):
    pass


class BelowNyquist(RescreenError):
    """Fewer than 2 pixels per color patch requested or detected."""


class BadPattern(RescreenError):
    """Pattern definition violates its invariants (gaps, overlaps, bad pitch)."""


# --- geometry ---

class AtInfinity(RescreenError):
    """Homogeneous w vanished while mapping a point."""


class NoConvergence(RescreenError):
    """Iterative inverse failed; the pixel is treated as unmapped."""


class DegenerateConfiguration(RescreenError):
    pass


class TooFewPoints(RescreenError):
    pass


# --- registration ---

class NoPatternFound(RescreenError):
    """No periodic lattice energy detected in the scan."""


class NotConverged(RescreenError):
    """Refinement hit its iteration cap; carries the best map found so far."""

    def __init__(self, message, best_map=None, diagnostics=None):
        super().__init__(message)
        self.best_map = best_map
        self.diagnostics = diagnostics or {}


class WindowsOutsideImage(RescreenError):
    pass


class NoMarksSpec(RescreenError):
    """Pattern has no registration-mark descriptor."""


# --- render ---

class EmptyOverlap(RescreenError):
    """Registration map places the whole screen outside the raster."""


class TooSparse(RescreenError):
    """Too many missing patches to demosaic."""


# --- colorimetry ---

class GridMismatch(RescreenError):
    """Spectral curve does not cover the working wavelength grid."""


class SingularPrimaries(RescreenError):
    pass


class BlackRegion(RescreenError):
    """White-balance region has a channel mean too close to zero."""


# --- project / service ---

class Unregistered(RescreenError):
    """Project has no committed registration map."""


class ProjectError(RescreenError):
    pass


class StageError(ProjectError):
    """A pipeline stage failed; carries the stage name for exit codes."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


class ViewportOutOfBounds(RescreenError):
    pass


class ClampWarning(UserWarning):
    """More than 0.1% of decoded samples fell outside [0, 1]."""
