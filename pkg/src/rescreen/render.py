"""Reconstruction stages: patch collection, demosaic, detail, adjustments.

The patch grid is the Bayer-like intermediate: per color class, a 2-D array
of weighted-mean luminosities over the patch lattice.  One output pixel per
patch, so an 8x8 cm plate with 0.1 mm patches reconstructs at roughly 800 x
800 regardless of scan resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import EmptyOverlap, TooSparse
from .geometry import RegistrationMap, scan_to_screen, screen_to_scan
from .raster import LinearRaster
from .screen import MM_PER_INCH, ScreenPattern

DEFAULT_MIN_WEIGHT = 0.5
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class PatchGrid:
    """Per-class weighted patch means over a lattice window.

    The lattice has one site per patch; tiles_w/tiles_h count sites along
    each axis, and values/weights are (3, tiles_h, tiles_w).  A site is
    missing for its owning class when its accumulated kernel mass is under
    min_weight.  origin is the screen coordinate of site (0, 0)'s corner,
    always a whole number of patch pitches, so class ownership (the global
    lattice phase) survives the windowing.
    """

    tiles_w: int
    tiles_h: int
    origin: tuple
    patches_per_tile: int
    values: np.ndarray
    weights: np.ndarray
    min_weight: float = DEFAULT_MIN_WEIGHT

    def __post_init__(self):
        if self.values.shape != (3, self.tiles_h, self.tiles_w):
            raise ValueError("values shape mismatch")
        if self.weights.shape != self.values.shape:
            raise ValueError("weights shape mismatch")

    @property
    def origin_patch(self) -> tuple:
        """Global integer lattice index of site (0, 0)."""
        n = self.patches_per_tile
        return (int(round(self.origin[0] * n)), int(round(self.origin[1] * n)))

    def class_sites(self, pattern: ScreenPattern) -> np.ndarray:
        """(tiles_h, tiles_w) class index of every lattice site."""
        n = pattern.patches_per_tile
        ox, oy = self.origin_patch
        rows = (np.arange(self.tiles_h) + oy) % n
        cols = (np.arange(self.tiles_w) + ox) % n
        table = pattern.class_table()
        return table[np.ix_(rows, cols)]

    def missing_fraction(self, pattern: ScreenPattern) -> float:
        sites = self.class_sites(pattern)
        own = np.take_along_axis(self.weights, sites[None], axis=0)[0]
        return float(np.mean(own < self.min_weight))


@dataclass(frozen=True)
class RenderParams:
    """Final adjustment knobs applied after colorimetry."""

    exposure: float = 1.0
    white_balance: tuple = (1.0, 1.0, 1.0)
    saturation: float = 1.0
    output_space: str = "display_rgb"
    mode: str = "demosaic_with_detail"

    def __post_init__(self):
        if not self.exposure > 0:
            raise ValueError("exposure gain must be positive")
        wb = tuple(float(g) for g in self.white_balance)
        if len(wb) != 3 or any(not g > 0 for g in wb):
            raise ValueError("white_balance needs 3 positive gains")
        if not (np.isfinite(self.saturation) and self.saturation >= 0):
            raise ValueError("saturation must be finite and non-negative")
        if self.output_space not in ("linear_xyz", "display_rgb"):
            raise ValueError(f"unknown output_space {self.output_space!r}")
        if self.mode not in ("screen_simulation", "demosaic", "demosaic_with_detail"):
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "white_balance", wb)


def _pixel_screen_coords(raster: LinearRaster, m: RegistrationMap):
    xs = np.arange(raster.width, dtype=np.float64)
    ys = np.arange(raster.height, dtype=np.float64)
    qx, qy = np.meshgrid(xs, ys)
    q = np.stack([qx, qy], axis=-1)
    return scan_to_screen(m, q.reshape(-1, 2), return_valid=True)


def collect_patch_grid(
    positive: LinearRaster,
    m: RegistrationMap,
    pattern: ScreenPattern,
    *,
    min_weight: float = DEFAULT_MIN_WEIGHT,
) -> PatchGrid:
    """Tent-weighted mean luminosity of every patch the scan covers.

    Each pixel lands in exactly one patch (the tent support is one patch
    pitch) with weight peaking at the patch center and vanishing at its
    border; accumulation order is fixed, so results are bit-reproducible.
    """
    if positive.channels != 1:
        raise ValueError("collect_patch_grid expects a 1-channel raster")
    n = pattern.patches_per_tile
    p, valid = _pixel_screen_coords(positive, m)
    if not np.any(valid):
        raise EmptyOverlap("no scan pixel maps into screen space")
    u = p[:, 0] * n
    v = p[:, 1] * n
    vals = positive.samples.reshape(-1).astype(np.float64)
    u, v, vals = u[valid], v[valid], vals[valid]

    gx = np.floor(u).astype(np.int64)
    gy = np.floor(v).astype(np.int64)
    ox, oy = int(gx.min()), int(gy.min())
    tiles_w = int(gx.max()) - ox + 1
    tiles_h = int(gy.max()) - oy + 1
    if tiles_w * tiles_h > 5e7:
        raise EmptyOverlap(
            f"map scatters the scan over {tiles_w}x{tiles_h} patches; "
            "geometry is implausible"
        )
    du = u - gx - 0.5
    dv = v - gy - 0.5
    w = np.maximum(0.0, 1.0 - 2.0 * np.abs(du)) * np.maximum(0.0, 1.0 - 2.0 * np.abs(dv))

    ix = gx - ox
    iy = gy - oy
    cls_rows = (np.arange(tiles_h) + oy) % n
    cls_cols = (np.arange(tiles_w) + ox) % n
    class_grid = pattern.class_table()[np.ix_(cls_rows, cls_cols)]
    cls = class_grid[iy, ix].astype(np.int64)

    key = (cls * tiles_h + iy) * tiles_w + ix
    size = 3 * tiles_h * tiles_w
    weights = np.bincount(key, weights=w, minlength=size).reshape(3, tiles_h, tiles_w)
    sums = np.bincount(key, weights=w * vals, minlength=size).reshape(3, tiles_h, tiles_w)
    values = np.divide(sums, weights, out=np.zeros_like(sums), where=weights > 0)
    return PatchGrid(
        tiles_w=tiles_w,
        tiles_h=tiles_h,
        origin=(ox / n, oy / n),
        patches_per_tile=n,
        values=values,
        weights=weights,
        min_weight=min_weight,
    )


def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    t2 = t * t
    t3 = t2 * t
    return np.stack(
        [
            -0.5 * t3 + t2 - 0.5 * t,
            1.5 * t3 - 2.5 * t2 + 1.0,
            -1.5 * t3 + 2.0 * t2 + 0.5 * t,
            0.5 * t3 - 0.5 * t2,
        ],
        axis=-1,
    )


def _interp_axis0(S: np.ndarray, pos: np.ndarray, method: str) -> np.ndarray:
    """Interpolate sample rows of S at fractional row positions (edge-clamped)."""
    if method == "bilinear":
        i0 = np.floor(pos).astype(np.int64)
        t = pos - i0
        lo = np.clip(i0, 0, S.shape[0] - 1)
        hi = np.clip(i0 + 1, 0, S.shape[0] - 1)
        return S[lo] * (1.0 - t)[:, None] + S[hi] * t[:, None]
    i0 = np.floor(pos).astype(np.int64)
    t = pos - i0
    w = _catmull_rom_weights(t)
    out = np.zeros((len(pos), S.shape[1]))
    for k in range(4):
        idx = np.clip(i0 - 1 + k, 0, S.shape[0] - 1)
        out += w[:, k][:, None] * S[idx]
    return out


def _infill(S: np.ndarray, missing: np.ndarray, passes: int = 10) -> np.ndarray:
    """Fill missing entries by repeated 4-neighbor averaging within the array."""
    S = S.copy()
    have = ~missing
    S[missing] = 0.0
    for _ in range(passes):
        if have.all():
            break
        num = np.zeros_like(S)
        den = np.zeros(S.shape)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            shifted = np.roll(S, (dy, dx), axis=(0, 1))
            ok = np.roll(have, (dy, dx), axis=(0, 1))
            # roll wraps; mask out the wrapped rows/cols
            if dy == 1:
                ok[0, :] = False
            elif dy == -1:
                ok[-1, :] = False
            if dx == 1:
                ok[:, 0] = False
            elif dx == -1:
                ok[:, -1] = False
            num += np.where(ok, shifted, 0.0)
            den += ok
        fill = ~have & (den > 0)
        S[fill] = num[fill] / den[fill]
        have = have | fill
    return S


def demosaic(grid: PatchGrid, pattern: ScreenPattern, *, method: str = "catmullrom") -> LinearRaster:
    """Full RGB at every patch site from the single-class patch mosaic.

    Per class, each sub-lattice of like patch sites is interpolated
    separably; at a class's own sites the grid value is kept exactly, and
    elsewhere the sub-lattice interpolants are averaged.
    """
    if method not in ("catmullrom", "bilinear"):
        raise ValueError(f"unknown demosaic method {method!r}")
    if grid.tiles_w < 4 or grid.tiles_h < 4:
        raise TooSparse(f"grid {grid.tiles_w}x{grid.tiles_h} is below 4x4")
    frac = grid.missing_fraction(pattern)
    if frac >= 0.2:
        raise TooSparse(f"{frac:.0%} of patches have no usable coverage")
    n = pattern.patches_per_tile
    table = pattern.class_table()
    ox, oy = grid.origin_patch
    H, W = grid.tiles_h, grid.tiles_w
    out = np.zeros((H, W, 3))
    rows = np.arange(H, dtype=np.float64)
    cols = np.arange(W, dtype=np.float64)
    for c in range(3):
        sites = [(a, b) for a in range(n) for b in range(n) if table[a, b] == c]
        acc = np.zeros((H, W))
        exact = []
        for a, b in sites:
            r0 = (a - oy) % n
            c0 = (b - ox) % n
            S = grid.values[c, r0::n, c0::n]
            Wm = grid.weights[c, r0::n, c0::n]
            if S.size == 0:
                continue
            S = _infill(S, Wm < grid.min_weight)
            interp_rows = _interp_axis0(S, (rows - r0) / n, method)
            interp = _interp_axis0(interp_rows.T, (cols - c0) / n, method).T
            acc += interp
            exact.append((r0, c0, S))
        acc /= max(len(sites), 1)
        # own sites keep the collected value exactly
        for r0, c0, S in exact:
            acc[r0::n, c0::n] = S
        out[:, :, c] = acc
    meta = {
        "origin_patch": (ox, oy),
        "patches_per_tile": n,
        "process_id": pattern.process_id,
        "missing_fraction": frac,
        "demosaic_method": method,
    }
    return LinearRaster(
        samples=np.clip(out, 0.0, 1.0).astype(np.float32),
        ppi=MM_PER_INCH / pattern.patch_pitch_mm,
        source_tag="positive_transparency",
        meta=meta,
    )


def simulate_viewing_screen(
    positive: LinearRaster,
    m: RegistrationMap,
    pattern: ScreenPattern,
    dye_rgb: np.ndarray,
) -> LinearRaster:
    """Overlay the virtual screen: each pixel's luminosity times the linear
    RGB of the dye class its screen position falls in."""
    if positive.channels != 1:
        raise ValueError("simulate_viewing_screen expects a 1-channel raster")
    dye_rgb = np.asarray(dye_rgb, dtype=np.float64)
    if dye_rgb.shape != (3, 3):
        raise ValueError("dye_rgb must be (3, 3): per-class rows of linear RGB")
    p, valid = _pixel_screen_coords(positive, m)
    cls = np.zeros(len(p), dtype=np.int64)
    cls[valid] = pattern.classify_points(p[valid])
    colors = dye_rgb[cls]
    colors[~valid] = 0.0
    out = colors.reshape(positive.height, positive.width, 3) * positive.samples[..., None]
    meta = dict(positive.meta)
    meta["unmapped_pixels"] = int(np.count_nonzero(~valid))
    return LinearRaster(
        samples=np.clip(out, 0.0, 1.0).astype(np.float32),
        ppi=positive.ppi,
        source_tag=positive.source_tag,
        meta=meta,
    )


def _median_tile_px(m: RegistrationMap, raster: LinearRaster) -> float:
    w, h = raster.width, raster.height
    corners = np.array([[0, 0], [w - 1.0, 0], [0, h - 1.0], [w - 1.0, h - 1.0]])
    pc, ok = scan_to_screen(m, corners, return_valid=True)
    pc = pc[ok]
    lo, hi = pc.min(axis=0), pc.max(axis=0)
    t = np.linspace(0.1, 0.9, 5)
    gx, gy = np.meshgrid(lo[0] + t * (hi[0] - lo[0]), lo[1] + t * (hi[1] - lo[1]))
    p = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    base = screen_to_scan(m, p)
    dx = screen_to_scan(m, p + [1.0, 0.0]) - base
    dy = screen_to_scan(m, p + [0.0, 1.0]) - base
    return float(np.median(np.concatenate([np.hypot(*dx.T), np.hypot(*dy.T)])))


def recover_detail(
    demosaiced: LinearRaster,
    positive: LinearRaster,
    m: RegistrationMap,
    *,
    ratio_clamp=(0.2, 5.0),
) -> LinearRaster:
    """Full-resolution output: demosaiced chroma modulated by the ratio of
    the scan to its one-tile-period blur (local luminance detail)."""
    if demosaiced.channels != 3 or positive.channels != 1:
        raise ValueError("need a 3-channel demosaiced raster and 1-channel positive")
    n = int(demosaiced.meta["patches_per_tile"])
    ox, oy = demosaiced.meta["origin_patch"]
    tile_px = _median_tile_px(m, positive)
    blur = gaussian_filter(positive.samples.astype(np.float64), sigma=tile_px / 2.0, mode="nearest")
    ratio = np.clip(
        positive.samples / np.maximum(blur, 1e-6), ratio_clamp[0], ratio_clamp[1]
    )
    p, valid = _pixel_screen_coords(positive, m)
    u = np.clip(p[:, 0] * n - 0.5 - ox, 0.0, demosaiced.width - 1.0)
    v = np.clip(p[:, 1] * n - 0.5 - oy, 0.0, demosaiced.height - 1.0)
    i0 = np.floor(v).astype(np.int64)
    j0 = np.floor(u).astype(np.int64)
    tv = (v - i0)[:, None]
    tu = (u - j0)[:, None]
    i1 = np.minimum(i0 + 1, demosaiced.height - 1)
    j1 = np.minimum(j0 + 1, demosaiced.width - 1)
    src = demosaiced.samples.astype(np.float64)
    up = (
        src[i0, j0] * (1 - tv) * (1 - tu)
        + src[i0, j1] * (1 - tv) * tu
        + src[i1, j0] * tv * (1 - tu)
        + src[i1, j1] * tv * tu
    )
    up[~valid] = 0.0
    out = up.reshape(positive.height, positive.width, 3) * ratio[..., None]
    meta = dict(demosaiced.meta)
    meta["detail_tile_px"] = tile_px
    meta["ratio_clamp"] = tuple(ratio_clamp)
    return LinearRaster(
        samples=np.clip(out, 0.0, 1.0).astype(np.float32),
        ppi=positive.ppi,
        source_tag="positive_transparency",
        meta=meta,
    )


def _srgb_encode(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def finalize(rgb: LinearRaster, params: RenderParams, process_to_output: np.ndarray) -> LinearRaster:
    """Color matrix, exposure, white balance, saturation, output encoding.

    Every neutral setting is skipped outright, so an all-identity call is a
    bit-identical pass-through.
    """
    if rgb.channels != 3:
        raise ValueError("finalize expects a 3-channel raster")
    M = np.asarray(process_to_output, dtype=np.float64)
    arr = rgb.samples.astype(np.float64)
    if not np.array_equal(M, np.eye(3)):
        arr = arr @ M.T
    if params.exposure != 1.0:
        arr = arr * params.exposure
    if params.white_balance != (1.0, 1.0, 1.0):
        arr = arr * np.asarray(params.white_balance)
    if params.saturation != 1.0:
        luma = arr @ LUMA_WEIGHTS
        arr = luma[..., None] + params.saturation * (arr - luma[..., None])
    arr = np.clip(arr, 0.0, 1.0)
    if params.output_space == "display_rgb":
        arr = _srgb_encode(arr)
    if (
        np.array_equal(M, np.eye(3))
        and params.exposure == 1.0
        and params.white_balance == (1.0, 1.0, 1.0)
        and params.saturation == 1.0
        and params.output_space == "linear_xyz"
    ):
        samples = rgb.samples
    else:
        samples = arr.astype(np.float32)
    meta = dict(rgb.meta)
    meta["render_params"] = {
        "exposure": params.exposure,
        "white_balance": params.white_balance,
        "saturation": params.saturation,
        "output_space": params.output_space,
    }
    return LinearRaster(samples=samples, ppi=rgb.ppi, source_tag=rgb.source_tag, meta=meta)
