"""Periodic screen geometry: which color sits where in the repeating tile.

Screen coordinates are defined so the whole screen is the 1x1 unit tile
repeated; a tile is subdivided into patches (tile_period_mm / patch_pitch_mm
per side).  Cell layouts ship as editable JSON preset data, not hard-coded
geometry, so reference measurements can be corrected without code changes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import BadPattern, BelowNyquist, UnknownProcess
from .spectra import COLOR_CLASSES, DyeSet, dyes_from_dict

PROCESS_IDS = ("paget", "finlay", "thames", "joly", "dufay", "custom")
MM_PER_INCH = 25.4

# Probe pitch for the construction-time partition check; 60 divides evenly
# by 2..6 so patch boundaries of every preset land exactly on probe points.
_PARTITION_PROBE = 60


@dataclass(frozen=True)
class RegistrationMarkSpec:
    """Strips of periodic disks along the plate edges anchoring the lattice."""

    disk_color: str
    disk_period_mm: float
    strip_width_mm: float
    disk_radius_mm: float
    edge: str = "top_and_bottom"
    shape: str = "disk_strip"

    def __post_init__(self):
        if self.edge != "top_and_bottom":
            raise BadPattern(f"unsupported mark edge {self.edge!r}")
        if self.shape != "disk_strip":
            raise BadPattern(f"unsupported mark shape {self.shape!r}")
        if self.disk_color not in COLOR_CLASSES:
            raise BadPattern(f"unknown mark color {self.disk_color!r}")
        for name in ("disk_period_mm", "strip_width_mm", "disk_radius_mm"):
            if not getattr(self, name) > 0:
                raise BadPattern(f"{name} must be positive")
        if 2 * self.disk_radius_mm > self.strip_width_mm:
            raise BadPattern("disks do not fit inside the strip")


@dataclass(frozen=True)
class Cell:
    """One colored region of the unit tile; polygon vertices in [0,1]^2."""

    polygon: tuple
    color_class: str

    def __post_init__(self):
        poly = tuple((float(x), float(y)) for x, y in self.polygon)
        if len(poly) < 3:
            raise BadPattern("cell polygon needs at least 3 vertices")
        for x, y in poly:
            if not (-1e-9 <= x <= 1 + 1e-9 and -1e-9 <= y <= 1 + 1e-9):
                raise BadPattern(f"cell vertex ({x}, {y}) outside the unit tile")
        if self.color_class not in COLOR_CLASSES:
            raise BadPattern(f"unknown color class {self.color_class!r}")
        object.__setattr__(self, "polygon", poly)

    def area(self) -> float:
        xs = np.array([p[0] for p in self.polygon])
        ys = np.array([p[1] for p in self.polygon])
        return float(abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1)))) / 2.0


def _points_in_polygon(px, py, poly):
    """Even-odd rule with > / < strictness, which resolves every boundary of
    an axis-aligned partition as half-open [lo, hi) membership."""
    xs = np.array([p[0] for p in poly])
    ys = np.array([p[1] for p in poly])
    inside = np.zeros(np.shape(px), dtype=bool)
    j = len(xs) - 1
    for i in range(len(xs)):
        xi, yi, xj, yj = xs[i], ys[i], xs[j], ys[j]
        crosses = (yi > py) != (yj > py)
        if np.any(crosses):
            x_int = xi + (py - yi) * (xj - xi) / (yj - yi + np.where(yj == yi, 1.0, 0.0))
            inside ^= crosses & (px < x_int)
        j = i
    return inside


def _grid_rect(poly, n: int):
    """(i0, i1, j0, j1) patch-index bounds if poly is a patch-aligned
    axis-parallel rectangle, else None."""
    xs = sorted({round(p[0] * n) for p in poly})
    ys = sorted({round(p[1] * n) for p in poly})
    if len(xs) != 2 or len(ys) != 2 or len(poly) != 4:
        return None
    for x, y in poly:
        if abs(x * n - round(x * n)) > 1e-9 * n or abs(y * n - round(y * n)) > 1e-9 * n:
            return None
    return ys[0], ys[1], xs[0], xs[1]


@dataclass(frozen=True)
class ScreenPattern:
    """Periodic tile of colored cells plus physical pitch and optional marks."""

    process_id: str
    cells: tuple
    patch_pitch_mm: float
    tile_period_mm: float
    marks: RegistrationMarkSpec | None = None
    dyes: DyeSet | None = None
    provenance: str = ""

    def __post_init__(self):
        if self.process_id not in PROCESS_IDS:
            raise UnknownProcess(f"unknown process {self.process_id!r}")
        if not self.patch_pitch_mm > 0 or not self.tile_period_mm > 0:
            raise BadPattern("pitches must be positive")
        ratio = self.tile_period_mm / self.patch_pitch_mm
        if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
            raise BadPattern(
                f"tile period {self.tile_period_mm} mm is not an integer multiple "
                f"of patch pitch {self.patch_pitch_mm} mm"
            )
        cells = tuple(c if isinstance(c, Cell) else Cell(*c) for c in self.cells)
        if not cells:
            raise BadPattern("pattern has no cells")
        present = {c.color_class for c in cells}
        if present != set(COLOR_CLASSES):
            raise BadPattern(f"every color class must appear; got {sorted(present)}")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "patch_pitch_mm", float(self.patch_pitch_mm))
        object.__setattr__(self, "tile_period_mm", float(self.tile_period_mm))
        self._check_partition()
        n = self.patches_per_tile
        aligned = all(_grid_rect(c.polygon, n) is not None for c in cells)
        object.__setattr__(self, "_aligned", aligned)
        object.__setattr__(self, "_table", self._build_table())

    @property
    def patches_per_tile(self) -> int:
        return round(self.tile_period_mm / self.patch_pitch_mm)

    def _check_partition(self):
        t = (np.arange(_PARTITION_PROBE) + 0.0) / _PARTITION_PROBE
        px, py = np.meshgrid(t, t)
        owners = np.zeros(px.shape, dtype=np.int32)
        for cell in self.cells:
            owners += _points_in_polygon(px, py, cell.polygon)
        if np.any(owners == 0):
            k = int(np.argmax(owners == 0))
            raise BadPattern(f"cells leave a gap near ({px.flat[k]:.4f}, {py.flat[k]:.4f})")
        if np.any(owners > 1):
            k = int(np.argmax(owners > 1))
            raise BadPattern(f"cells overlap near ({px.flat[k]:.4f}, {py.flat[k]:.4f})")

    def _build_table(self):
        n = self.patches_per_tile
        centers = (np.arange(n) + 0.5) / n
        cx, cy = np.meshgrid(centers, centers)
        return self._classify_polygon(cx, cy)

    def _classify_polygon(self, px, py):
        idx = np.full(np.shape(px), -1, dtype=np.int8)
        for cell in self.cells:
            free = idx < 0
            hit = free & _points_in_polygon(px, py, cell.polygon)
            idx[hit] = COLOR_CLASSES.index(cell.color_class)
        if np.any(idx < 0):
            # float roundoff can push a boundary point just outside every
            # cell; a fixed inward nudge keeps classification total
            bad = idx < 0
            idx2 = self._classify_polygon(
                np.maximum(np.asarray(px)[bad] - 1e-9, 0.0),
                np.maximum(np.asarray(py)[bad] - 1e-9, 0.0),
            )
            idx[bad] = idx2
            if np.any(idx < 0):
                raise BadPattern("point escaped the cell partition")
        return idx

    def classify_points(self, points) -> np.ndarray:
        """Color-class index (0=R, 1=G, 2=B) for screen points of any shape
        (..., 2); coordinates are wrapped into the unit tile first."""
        p = np.asarray(points, dtype=np.float64)
        u = np.mod(p[..., 0], 1.0)
        v = np.mod(p[..., 1], 1.0)
        u[u >= 1.0] = 0.0
        v[v >= 1.0] = 0.0
        if self._aligned:
            n = self.patches_per_tile
            j = np.clip(np.floor(u * n).astype(np.int64), 0, n - 1)
            i = np.clip(np.floor(v * n).astype(np.int64), 0, n - 1)
            return self._table[i, j]
        return self._classify_polygon(u, v)

    def class_table(self) -> np.ndarray:
        """(n, n) class index of each patch in the tile, row = y, col = x."""
        return self._table.copy()

    def class_fractions(self) -> np.ndarray:
        """Area fraction per class (R, G, B) from exact polygon areas."""
        fractions = np.zeros(3)
        for cell in self.cells:
            fractions[COLOR_CLASSES.index(cell.color_class)] += cell.area()
        return fractions / fractions.sum()

    def lattice_rotations_deg(self) -> tuple:
        """Rotations mapping the patch lattice onto itself; candidate
        ambiguities a mono scan cannot distinguish without marks."""
        return (0.0, 90.0, 180.0, 270.0)


def color_at(pattern: ScreenPattern, p) -> str:
    """Color class of the cell containing p, wrapped into the unit tile.

    Boundary points resolve by half-open membership; repeated calls agree.
    """
    idx = pattern.classify_points(np.asarray(p, dtype=np.float64).reshape(1, 2))
    return COLOR_CLASSES[int(idx[0])]


def min_ppi(pattern: ScreenPattern, pixels_per_patch: float) -> float:
    """Scan resolution needed for the requested pixels per color patch.

    pixels_per_patch below 2 undersamples the patch lattice and is refused.
    """
    if pixels_per_patch < 2.0:
        raise BelowNyquist(f"{pixels_per_patch} px/patch is below the sampling limit of 2")
    return pixels_per_patch * MM_PER_INCH / pattern.patch_pitch_mm


def pattern_from_dict(d: dict) -> ScreenPattern:
    """Build a pattern from the documented JSON layout (see data/patterns)."""
    try:
        cells = tuple(Cell(tuple(map(tuple, c["polygon"])), c["class"]) for c in d["cells"])
        marks = None
        if d.get("marks"):
            m = d["marks"]
            marks = RegistrationMarkSpec(
                disk_color=m["disk_color"],
                disk_period_mm=float(m["disk_period_mm"]),
                strip_width_mm=float(m["strip_width_mm"]),
                disk_radius_mm=float(m["disk_radius_mm"]),
                edge=m.get("edge", "top_and_bottom"),
                shape=m.get("shape", "disk_strip"),
            )
        dyes = None
        if d.get("dyes"):
            dyes = dyes_from_dict(d["dyes"], provenance=d.get("provenance", ""))
        return ScreenPattern(
            process_id=d["process_id"],
            cells=cells,
            patch_pitch_mm=float(d["patch_pitch_mm"]),
            tile_period_mm=float(d["tile_period_mm"]),
            marks=marks,
            dyes=dyes,
            provenance=d.get("provenance", ""),
        )
    except KeyError as exc:
        raise BadPattern(f"pattern definition missing key {exc}") from exc


def load_pattern(path) -> ScreenPattern:
    """Load a custom pattern from a UTF-8 JSON file."""
    with open(path, encoding="utf-8") as fh:
        return pattern_from_dict(json.load(fh))


def pattern_preset(process_id: str) -> ScreenPattern:
    """Bundled pattern for a known historical process.

    `custom` has no preset by definition; supply those via load_pattern.
    """
    if process_id not in PROCESS_IDS or process_id == "custom":
        raise UnknownProcess(f"no preset for process {process_id!r}")
    ref = resources.files("rescreen") / "data" / "patterns" / f"{process_id}.json"
    return pattern_from_dict(json.loads(ref.read_text(encoding="utf-8")))
