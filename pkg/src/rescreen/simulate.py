"""Forward model of taking a screen plate photograph and scanning it.

The chain mirrors the historical process: scene light passes the taking
screen (each patch records one color component), exposes a monochrome
negative, and the developed negative is scanned as linear transmittance.
Synthetic plates made here carry their exact ground-truth map and scene, so
the reconstruction pipeline can be scored against known answers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .geometry import RegistrationMap, compose_map, scan_to_screen
from .raster import LinearRaster
from .screen import MM_PER_INCH, ScreenPattern

# Mark strip transmittances on a negative scan: the green disks pass light
# and expose the emulsion, so they read dense (dark) on a light background.
MARK_DISK_T_NEG = 0.15
MARK_BG_T_NEG = 0.88

# Effective exposure per filter class (filter transmittance times emulsion
# sensitivity): green strongest, red and blue close but not equal, as with
# real taking screens.  Equal red/blue weights would make a quarter-turn of
# a checkerboard screen statistically invisible to any patch-mean objective.
CLASS_EXPOSURE_WEIGHTS = (0.55, 1.0, 0.40)


def mark_rows_tiles(pattern: ScreenPattern, tiles_h: int) -> tuple:
    """Screen y of the top and bottom disk rows, snapped to the tile lattice."""
    strip_t = pattern.marks.strip_width_mm / pattern.tile_period_mm
    off = round(strip_t / 2.0)
    return (-float(off), float(tiles_h + off))


def make_scene(
    tiles_w: int,
    tiles_h: int,
    pattern: ScreenPattern,
    seed: int = 0,
    control: tuple = (8, 8),
) -> np.ndarray:
    """Smooth random RGB ground truth, one sample per patch, values in
    [0.05, 0.95] so the negative model stays in its invertible range.

    control sets the number of texture features across (w, h); smoothing
    white noise keeps the scene spectrum free of grid harmonics that could
    masquerade as screen carriers.
    """
    n = pattern.patches_per_tile
    rng = np.random.default_rng(seed)
    cw, ch_pts = control
    h, w = tiles_h * n, tiles_w * n
    out = np.empty((h, w, 3))
    for ch in range(3):
        noise = rng.normal(size=(h, w))
        smooth = gaussian_filter(noise, sigma=(0.5 * h / ch_pts, 0.5 * w / cw), mode="reflect")
        smooth -= smooth.mean()
        sd = float(smooth.std())
        out[:, :, ch] = 0.5 + 0.18 * (smooth / max(sd, 1e-12))
    return np.clip(out, 0.05, 0.95)


@dataclass(frozen=True)
class SimulatedPlate:
    """A synthetic scan bundled with its ground truth."""

    scan: LinearRaster
    map: RegistrationMap
    scene: np.ndarray
    pattern: ScreenPattern
    tiles_w: int
    tiles_h: int
    params: dict = field(default_factory=dict)


def plate_map(
    pattern: ScreenPattern,
    ppi: float,
    tiles_w: int,
    tiles_h: int,
    *,
    rotation_deg: float = 0.0,
    scale_error: float = 0.0,
    skew_px: float = 0.0,
    k1: float = 0.0,
    phase_tiles=(0.0, 0.0),
    margin_mm: float = 3.0,
):
    """True map and scan shape for a plate of tiles_w x tiles_h tiles.

    The screen rectangle plus margin is rotated into scan space and the
    translation chosen so everything lands inside the image; phase_tiles
    shifts the lattice by a sub-tile amount on top of that.
    """
    tile_px = ppi / MM_PER_INCH * pattern.tile_period_mm * (1.0 + scale_error)
    pad_t = margin_mm / pattern.tile_period_mm
    th = np.radians(rotation_deg)
    A = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) @ np.array(
        [[tile_px, skew_px], [0.0, tile_px]]
    )
    corners = np.array(
        [
            [-pad_t, -pad_t],
            [tiles_w + pad_t, -pad_t],
            [-pad_t, tiles_h + pad_t],
            [tiles_w + pad_t, tiles_h + pad_t],
        ]
    )
    qc = corners @ A.T
    lo = qc.min(axis=0)
    hi = qc.max(axis=0)
    shift = -lo + np.asarray(phase_tiles, dtype=np.float64) @ A.T
    w_px = int(np.ceil(hi[0] - lo[0])) + 1
    h_px = int(np.ceil(hi[1] - lo[1])) + 1
    center = ((w_px - 1) / 2.0, (h_px - 1) / 2.0)
    radius = float(np.hypot(w_px, h_px) / 2.0)
    m = compose_map(
        rotation_deg=rotation_deg,
        scale_x_px=tile_px,
        scale_y_px=tile_px,
        skew_px=skew_px,
        dx_px=float(shift[0]),
        dy_px=float(shift[1]),
        k1=k1,
        principal_point=center,
        norm_radius_px=radius,
    )
    return m, (h_px, w_px)


def _mark_transmittance(pattern: ScreenPattern, p: np.ndarray, tiles_w: int, tiles_h: int):
    """(mask, T) for points inside the mark strips, in screen coordinates."""
    spec = pattern.marks
    tile_mm = pattern.tile_period_mm
    strip_t = spec.strip_width_mm / tile_mm
    period_t = spec.disk_period_mm / tile_mm
    radius_t = spec.disk_radius_mm / tile_mm
    y_top, y_bot = mark_rows_tiles(pattern, tiles_h)
    px, py = p[..., 0], p[..., 1]
    in_x = (px >= -strip_t) & (px <= tiles_w + strip_t)
    t_vals = np.zeros(px.shape)
    mask = np.zeros(px.shape, dtype=bool)
    for y_c in (y_top, y_bot):
        band = in_x & (np.abs(py - y_c) <= strip_t / 2.0)
        if not np.any(band):
            continue
        dx = px[band] - np.round(px[band] / period_t) * period_t
        dy = py[band] - y_c
        disk = dx * dx + dy * dy <= radius_t * radius_t
        t_vals[band] = np.where(disk, MARK_DISK_T_NEG, MARK_BG_T_NEG)
        mask |= band
    return mask, t_vals


def simulate_scan(
    scene: np.ndarray,
    pattern: ScreenPattern,
    m: RegistrationMap,
    shape_px: tuple,
    ppi: float,
    *,
    gamma: float = 1.0,
    t_floor: float = 0.01,
    noise_sigma: float = 0.0,
    supersample: int = 2,
    with_marks: bool = False,
    seed: int = 0,
) -> LinearRaster:
    """Scan of the negative exposed through the taking screen.

    Forward transmittance T = t_floor * E**(-1/gamma) for in-range exposures,
    the exact inverse of the reconstruction's negative-to-positive formula.
    Pixel values average `supersample`^2 sub-positions (scanner aperture).
    """
    h_px, w_px = shape_px
    n = pattern.patches_per_tile
    tiles_h = scene.shape[0] // n
    tiles_w = scene.shape[1] // n
    acc = np.zeros((h_px, w_px))
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    e_min = t_floor ** gamma
    for oy in offsets:
        for ox in offsets:
            xs = np.arange(w_px) + ox
            ys = np.arange(h_px) + oy
            qx, qy = np.meshgrid(xs, ys)
            q = np.stack([qx, qy], axis=-1)
            p = scan_to_screen(m, q.reshape(-1, 2)).reshape(h_px, w_px, 2)
            cls = pattern.classify_points(p)
            inside = (
                (p[..., 0] >= 0)
                & (p[..., 0] < tiles_w)
                & (p[..., 1] >= 0)
                & (p[..., 1] < tiles_h)
            )
            exposure = np.zeros((h_px, w_px))
            u = p[..., 0] * n - 0.5
            v = p[..., 1] * n - 0.5
            for ch in range(3):
                sel = inside & (cls == ch)
                if np.any(sel):
                    exposure[sel] = CLASS_EXPOSURE_WEIGHTS[ch] * map_coordinates(
                        scene[:, :, ch], [v[sel], u[sel]], order=1, mode="nearest"
                    )
            t_neg = np.where(
                exposure > 0,
                t_floor * np.clip(exposure, e_min, 1.0) ** (-1.0 / gamma),
                1.0,
            )
            if with_marks and pattern.marks is not None:
                mask, t_marks = _mark_transmittance(pattern, p, tiles_w, tiles_h)
                t_neg[mask] = t_marks[mask]
            acc += t_neg
    acc /= supersample ** 2
    if noise_sigma > 0:
        acc += np.random.default_rng(seed).normal(0.0, noise_sigma, acc.shape)
    return LinearRaster(
        samples=np.clip(acc, 0.0, 1.0).astype(np.float32),
        ppi=ppi,
        source_tag="negative",
        meta={"synthetic": True},
    )


def make_plate(
    pattern: ScreenPattern,
    ppi: float,
    tiles_w: int,
    tiles_h: int,
    *,
    rotation_deg: float = 0.0,
    scale_error: float = 0.0,
    skew_px: float = 0.0,
    k1: float = 0.0,
    phase_tiles=(0.0, 0.0),
    margin_mm: float = 3.0,
    gamma: float = 1.0,
    t_floor: float = 0.01,
    noise_sigma: float = 0.0,
    supersample: int = 2,
    with_marks: bool = False,
    seed: int = 0,
    scene_control: tuple = (8, 8),
) -> SimulatedPlate:
    """One-stop synthetic plate: random scene, true map, simulated scan."""
    scene = make_scene(tiles_w, tiles_h, pattern, seed=seed, control=scene_control)
    m, shape_px = plate_map(
        pattern,
        ppi,
        tiles_w,
        tiles_h,
        rotation_deg=rotation_deg,
        scale_error=scale_error,
        skew_px=skew_px,
        k1=k1,
        phase_tiles=phase_tiles,
        margin_mm=margin_mm,
    )
    scan = simulate_scan(
        scene,
        pattern,
        m,
        shape_px,
        ppi,
        gamma=gamma,
        t_floor=t_floor,
        noise_sigma=noise_sigma,
        supersample=supersample,
        with_marks=with_marks,
        seed=seed + 1,
    )
    params = {
        "rotation_deg": rotation_deg,
        "scale_error": scale_error,
        "skew_px": skew_px,
        "k1": k1,
        "phase_tiles": tuple(phase_tiles),
        "gamma": gamma,
        "t_floor": t_floor,
        "noise_sigma": noise_sigma,
        "seed": seed,
    }
    return SimulatedPlate(
        scan=scan,
        map=m,
        scene=scene,
        pattern=pattern,
        tiles_w=tiles_w,
        tiles_h=tiles_h,
        params=params,
    )
