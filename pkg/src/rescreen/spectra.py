"""Spectral curves and dye sets.

All colorimetric integration in this project happens on a fixed 5 nm grid
covering 380-730 nm; curves defined on other grids are resampled linearly
onto it.  Values are unitless (transmittance, relative power or observer
weight depending on role).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch

GRID_LO_NM = 380.0
GRID_HI_NM = 730.0
GRID_STEP_NM = 5.0

#: The common working grid: 380, 385, ..., 730 nm (71 samples).
WORKING_GRID = np.arange(GRID_LO_NM, GRID_HI_NM + GRID_STEP_NM / 2, GRID_STEP_NM)

COLOR_CLASSES = ("R", "G", "B")

# Idealized fallback pass-bands, used when no measured dye spectra exist.
IDEAL_BANDS_NM = {"R": (600.0, 700.0), "G": (500.0, 600.0), "B": (400.0, 500.0)}


@dataclass(frozen=True)
class SpectralCurve:
    """A sampled spectral quantity: strictly ascending wavelengths, finite values."""

    wavelengths_nm: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        if wl.ndim != 1 or vals.shape != wl.shape:
            raise ValueError("wavelengths and values must be 1-D and the same length")
        if wl.size < 2 or not np.all(np.diff(wl) > 0):
            raise ValueError("wavelengths must be strictly ascending")
        if not np.all(np.isfinite(vals)):
            raise ValueError("curve values must be finite")
        object.__setattr__(self, "wavelengths_nm", wl)
        object.__setattr__(self, "values", vals)

    def resample(self, grid: np.ndarray = WORKING_GRID) -> np.ndarray:
        """Linear interpolation of the curve onto `grid`.

        Raises GridMismatch if the curve does not cover the grid; a curve
        already sampled on the grid is returned exactly.
        """
        grid = np.asarray(grid, dtype=np.float64)
        if self.wavelengths_nm[0] > grid[0] + 1e-9 or self.wavelengths_nm[-1] < grid[-1] - 1e-9:
            raise GridMismatch(
                f"curve covers {self.wavelengths_nm[0]:g}-{self.wavelengths_nm[-1]:g} nm, "
                f"grid needs {grid[0]:g}-{grid[-1]:g} nm"
            )
        return np.interp(grid, self.wavelengths_nm, self.values)


def block_band_curve(lo_nm: float, hi_nm: float, grid: np.ndarray = WORKING_GRID) -> SpectralCurve:
    """Idealized block dye: unit transmittance inside [lo, hi), zero outside."""
    if not lo_nm < hi_nm:
        raise ValueError("band_lo_nm must be below band_hi_nm")
    grid = np.asarray(grid, dtype=np.float64)
    vals = ((grid >= lo_nm) & (grid < hi_nm)).astype(np.float64)
    return SpectralCurve(grid, vals)


@dataclass(frozen=True)
class DyeSet:
    """Transmittance curve per color class, plus a provenance note.

    Curves must be in [0, 1] and cover the working grid with step <= 10 nm.
    """

    curves: dict  # color_class -> SpectralCurve
    provenance: str = ""

    def __post_init__(self):
        for cls in COLOR_CLASSES:
            if cls not in self.curves:
                raise ValueError(f"dye set is missing class {cls}")
            curve = self.curves[cls]
            if np.any(curve.values < 0) or np.any(curve.values > 1):
                raise ValueError(f"dye {cls} transmittance outside [0, 1]")
            if np.max(np.diff(curve.wavelengths_nm)) > 10.0 + 1e-9:
                raise ValueError(f"dye {cls} sampled coarser than 10 nm")
            curve.resample()  # raises GridMismatch if coverage is short

    def transmittance_matrix(self, grid: np.ndarray = WORKING_GRID) -> np.ndarray:
        """(3, n_grid) array of per-class transmittance on `grid`, order R, G, B."""
        return np.stack([self.curves[c].resample(grid) for c in COLOR_CLASSES])


def ideal_dyes(note: str = "idealized block dyes (approximate)") -> DyeSet:
    """Fallback DyeSet: rectangular pass-bands R 600-700, G 500-600, B 400-500 nm."""
    curves = {c: block_band_curve(*IDEAL_BANDS_NM[c]) for c in COLOR_CLASSES}
    return DyeSet(curves=curves, provenance=note)


def dyes_from_dict(spec: dict, provenance: str = "") -> DyeSet:
    """Build a DyeSet from the pattern-file dye mapping.

    Each class maps either to {"wavelengths": [...], "values": [...]} or to
    {"band_lo_nm": x, "band_hi_nm": y}.
    """
    curves = {}
    for cls in COLOR_CLASSES:
        entry = spec.get(cls)
        if entry is None:
            raise ValueError(f"dyes mapping is missing class {cls}")
        if "band_lo_nm" in entry:
            curves[cls] = block_band_curve(float(entry["band_lo_nm"]), float(entry["band_hi_nm"]))
        else:
            curves[cls] = SpectralCurve(
                np.asarray(entry["wavelengths"], dtype=np.float64),
                np.asarray(entry["values"], dtype=np.float64),
            )
    return DyeSet(curves=curves, provenance=provenance)
