"""Dye transmittances to XYZ and display RGB under a chosen illuminant.

Integration is rectangular-rule on the 5 nm working grid against the 1931
2-degree observer.  The process->XYZ matrix is normalized so that a clear
plate (all classes at unit luminosity, weighted by the pattern's class area
fractions) lands on Y = 1, i.e. renders as illuminant white.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import BlackRegion, GridMismatch, SingularPrimaries
from .spectra import GRID_STEP_NM, WORKING_GRID, DyeSet, SpectralCurve

ILLUMINANT_NAMES = ("D50", "D65", "equal_energy")

# Bradford cone response matrix used for chromatic adaptation.
_BRADFORD = np.array(
    [
        [0.8951, 0.2664, -0.1614],
        [-0.7502, 1.7135, 0.0367],
        [0.0389, -0.0685, 1.0296],
    ]
)


@dataclass(frozen=True)
class Observer:
    """Color matching function triplet on a shared wavelength grid."""

    xbar: SpectralCurve
    ybar: SpectralCurve
    zbar: SpectralCurve

    def __post_init__(self):
        grids = [self.xbar.wavelengths_nm, self.ybar.wavelengths_nm, self.zbar.wavelengths_nm]
        if not all(np.array_equal(grids[0], g) for g in grids[1:]):
            raise GridMismatch("observer curves must share one wavelength grid")
        for curve in (self.xbar, self.ybar, self.zbar):
            if np.any(curve.values < 0):
                raise ValueError("observer weights must be non-negative")

    def matrix(self, grid: np.ndarray = WORKING_GRID) -> np.ndarray:
        """(3, n) stacked xbar/ybar/zbar on `grid`."""
        return np.stack([c.resample(grid) for c in (self.xbar, self.ybar, self.zbar)])


@dataclass(frozen=True)
class Illuminant:
    name: str
    curve: SpectralCurve

    def __post_init__(self):
        if np.any(self.curve.values < 0):
            raise ValueError("illuminant power must be non-negative")


def _read_table(filename: str) -> np.ndarray:
    ref = resources.files("rescreen") / "data" / "cie" / filename
    rows = []
    with ref.open(encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            rows.append([float(x) for x in row])
    return np.array(rows)


def cie_1931_observer() -> Observer:
    """The bundled 1931 2-degree standard observer at 5 nm."""
    t = _read_table("cie1931_observer_2deg.csv")
    wl = t[:, 0]
    return Observer(
        xbar=SpectralCurve(wl, t[:, 1]),
        ybar=SpectralCurve(wl, t[:, 2]),
        zbar=SpectralCurve(wl, t[:, 3]),
    )


def illuminant(name: str) -> Illuminant:
    """Bundled D50/D65 tables or the flat equal-energy spectrum."""
    if name == "equal_energy":
        return Illuminant(name, SpectralCurve(WORKING_GRID, np.full(WORKING_GRID.shape, 100.0)))
    if name not in ILLUMINANT_NAMES:
        raise ValueError(f"unknown illuminant {name!r}; use one of {ILLUMINANT_NAMES}")
    t = _read_table(f"illuminant_{name.lower()}.csv")
    return Illuminant(name, SpectralCurve(t[:, 0], t[:, 1]))


def white_point_xyz(illum: Illuminant, observer: Observer) -> np.ndarray:
    """XYZ of the illuminant through clear glass, normalized to Y = 1."""
    S = illum.curve.resample()
    obs = observer.matrix()
    xyz = (obs * S).sum(axis=1) * GRID_STEP_NM
    if xyz[1] <= 0:
        raise ValueError("illuminant carries no luminance")
    return xyz / xyz[1]


def dye_to_xyz_matrix(
    dyes: DyeSet,
    illum: Illuminant,
    observer: Observer,
    class_fractions=(1 / 3, 1 / 3, 1 / 3),
) -> np.ndarray:
    """3x3 matrix taking per-class luminosities (R, G, B) to XYZ.

    Column c integrates dye transmittance x illuminant x observer; the whole
    matrix is scaled so the fraction-weighted white stimulus has Y = 1.
    """
    T = dyes.transmittance_matrix()
    S = illum.curve.resample()
    obs = observer.matrix()
    M = np.empty((3, 3))
    for c in range(3):
        M[:, c] = (obs * (T[c] * S)).sum(axis=1) * GRID_STEP_NM
    f = np.asarray(class_fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or f.sum() <= 0:
        raise ValueError("class_fractions must be 3 non-negative reals")
    f = f / f.sum()
    white_y = (M @ f)[1]
    if white_y < 1e-12:
        # opaque dye set: nothing to normalize against
        return M
    return M / white_y


@dataclass(frozen=True)
class DisplayTarget:
    """Display primaries and white, as CIE xy chromaticities."""

    name: str
    primaries_xy: tuple  # ((xr, yr), (xg, yg), (xb, yb))
    white_xy: tuple


SRGB_D65 = DisplayTarget(
    name="sRGB",
    primaries_xy=((0.64, 0.33), (0.30, 0.60), (0.15, 0.06)),
    white_xy=(0.3127, 0.3290),
)


def _xyz_from_xy(xy, Y=1.0) -> np.ndarray:
    x, y = xy
    if y <= 0:
        raise SingularPrimaries(f"chromaticity y must be positive, got {y}")
    return np.array([x / y * Y, Y, (1.0 - x - y) / y * Y])


def rgb_to_xyz_matrix(target: DisplayTarget) -> np.ndarray:
    """Linear display RGB -> XYZ for the target's primaries and white."""
    P = np.column_stack([_xyz_from_xy(xy) for xy in target.primaries_xy])
    if abs(np.linalg.det(P)) < 1e-12:
        raise SingularPrimaries(f"{target.name} primaries are collinear")
    W = _xyz_from_xy(target.white_xy)
    scale = np.linalg.solve(P, W)
    if np.any(np.abs(scale) < 1e-12):
        raise SingularPrimaries(f"{target.name} white is unreachable from its primaries")
    return P * scale


def bradford_adaptation(source_white_xyz, target_white_xyz) -> np.ndarray:
    """Linear Bradford transform taking source-white XYZ to target-white XYZ."""
    src = _BRADFORD @ np.asarray(source_white_xyz, dtype=np.float64)
    dst = _BRADFORD @ np.asarray(target_white_xyz, dtype=np.float64)
    if np.any(np.abs(src) < 1e-12):
        raise SingularPrimaries("source white has a vanishing cone response")
    return np.linalg.inv(_BRADFORD) @ np.diag(dst / src) @ _BRADFORD


def xyz_to_display(xyz, target: DisplayTarget = SRGB_D65, source_white_xyz=None, *, return_stats=False):
    """XYZ (..., 3) to linear display RGB, clamped to [0, 1].

    With source_white_xyz set, a Bradford adaptation from that white to the
    target white runs first.  return_stats adds the out-of-gamut fraction.
    """
    M = np.linalg.inv(rgb_to_xyz_matrix(target))
    if source_white_xyz is not None:
        M = M @ bradford_adaptation(source_white_xyz, _xyz_from_xy(target.white_xy))
    arr = np.asarray(xyz, dtype=np.float64)
    rgb = arr @ M.T
    clipped = int(np.count_nonzero((rgb < 0.0) | (rgb > 1.0)))
    out = np.clip(rgb, 0.0, 1.0)
    if return_stats:
        return out, clipped / max(rgb.size, 1)
    return out


def display_to_xyz(rgb, target: DisplayTarget = SRGB_D65) -> np.ndarray:
    """Inverse of xyz_to_display for in-gamut values (no adaptation)."""
    return np.asarray(rgb, dtype=np.float64) @ rgb_to_xyz_matrix(target).T


def process_to_display_matrix(
    dyes: DyeSet,
    illum: Illuminant,
    observer: Observer,
    class_fractions=(1 / 3, 1 / 3, 1 / 3),
    target: DisplayTarget = SRGB_D65,
) -> np.ndarray:
    """Combined per-class luminosity -> linear display RGB matrix.

    Class luminosities are weighted by screen area fractions (viewing mixes
    patch areas), and adaptation runs from the clear-plate white to the
    display white, so an unexposed plate renders as display white exactly.
    """
    f = np.asarray(class_fractions, dtype=np.float64)
    f = f / f.sum()
    dye_m = dye_to_xyz_matrix(dyes, illum, observer, f) @ np.diag(f)
    plate_white = dye_m @ np.ones(3)
    cat = bradford_adaptation(plate_white, _xyz_from_xy(target.white_xy))
    return np.linalg.inv(rgb_to_xyz_matrix(target)) @ cat @ dye_m


def auto_white_balance(rgb_samples, region) -> tuple:
    """Per-channel gains equalizing channel means over a scan region.

    region is (x, y, w, h) in pixels over an (h, w, 3) array; needs >= 64 px.
    """
    arr = np.asarray(rgb_samples, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("auto_white_balance expects an (h, w, 3) array")
    x, y, w, h = (int(v) for v in region)
    if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > arr.shape[1] or y + h > arr.shape[0]:
        raise ValueError(f"region {region} outside image {arr.shape[1]}x{arr.shape[0]}")
    if w * h < 64:
        raise ValueError("white-balance region must cover at least 64 px")
    means = arr[y : y + h, x : x + w].reshape(-1, 3).mean(axis=0)
    if np.any(means < 1e-6):
        raise BlackRegion(f"channel means {means} too dark to balance against")
    m = means.mean()
    return (m / means[0], m / means[1], m / means[2])
