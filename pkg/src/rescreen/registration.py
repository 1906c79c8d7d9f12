"""Estimate the screen-to-scan map from the scan itself.

Three stages: a frequency-domain coarse search for the lattice period,
rotation, and phase; optional absolute anchoring from the disk-strip
registration marks some plates carry; and a derivative-free refinement that
maximizes how cleanly patches of one color class separate from the others.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.signal import fftconvolve
from scipy.ndimage import uniform_filter

from .errors import NoMarksSpec, NoPatternFound, NotConverged, WindowsOutsideImage
from .geometry import (
    RegistrationMap,
    compose_map,
    decompose_map,
    fit_map,
    screen_to_scan,
    scan_to_screen,
)
from .raster import LinearRaster
from .screen import MM_PER_INCH, ScreenPattern

# how far the true period may sit from the one implied by nominal_ppi
CAPTURE_RANGE = 0.25
CONFIDENCE_THRESHOLD = 0.2
MAX_COARSE_CROP = 1024
REFINE_MAX_ITER = 500
REFINE_FTOL = 1e-3
# trust region half-widths around the initial map: dx, dy (patches),
# rotation (deg), log-period, skew (fraction of period), k1; polishing
# must not re-estimate what the coarse stage or the marks already pinned
REFINE_TRUST = (0.75, 0.75, 0.5, 0.0075, 0.01, 0.02)
MARK_NCC_THRESHOLD = 0.45
# a refined map disagreeing with detected marks by more than this many
# patches has overfit the windows; the mark fit wins
MARKS_RESIDUAL_LIMIT = 0.25


@dataclass(frozen=True)
class CoarseEstimate:
    """Lattice geometry read off the scan's spectrum.

    phase_px is the scan-pixel offset of a tile origin near the image
    origin; diagnostics carries the peak table, the lattice basis, the
    rotational symmetry of the pattern, and alternate phases the spectrum
    cannot tell apart (class-assignment ambiguity of mark-free scans).
    """

    period_px: float
    rotation_deg: float
    phase_px: tuple
    confidence: float
    basis: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.period_px > 0:
            raise ValueError("period_px must be positive")


def _tile_harmonics(pattern: ScreenPattern, max_order: int = 1):
    """First-order integer harmonics of the class layout with their complex
    amplitude per class (box-filtered for finite patch size)."""
    n = pattern.patches_per_tile
    table = pattern.class_table()
    amps = []
    for c in range(3):
        ind = (table == c).astype(np.float64)
        amps.append(np.fft.fft2(ind) / (n * n))
    out = []
    for hy in range(-max_order, max_order + 1):
        for hx in range(-max_order, max_order + 1):
            if (hy, hx) == (0, 0):
                continue
            if hy < 0 or (hy == 0 and hx < 0):
                continue
            box = np.sinc(hx / n) * np.sinc(hy / n)
            # table samples index patch corners; actual patches are centered
            # half a patch in, which shifts every harmonic's phase
            center = np.exp(-2j * np.pi * (hx + hy) * 0.5 / n)
            a = np.array([amps[c][hy % n, hx % n] for c in range(3)]) * box * center
            w = float(np.sqrt((np.abs(a) ** 2).sum()))
            out.append(((hx, hy), a, w))
    wmax = max(h[2] for h in out)
    out = [h for h in out if h[2] >= 0.15 * wmax]
    out.sort(key=lambda h: -h[2])
    return out


def _hann2d(h, w):
    return np.outer(np.hanning(h), np.hanning(w))


def _central_crop(img: np.ndarray, size: int):
    # Straight plate or strip borders produce spectral ridges along the very
    # directions the carriers live on, so for small scans the analysis window
    # must stay well inside the plate: never take more than half of either
    # dimension (scans are framed with the plate filling most of the image).
    h, w = img.shape
    ch = min(size, max(128, h // 2), h)
    cw = min(size, max(128, w // 2), w)
    y0 = (h - ch) // 2
    x0 = (w - cw) // 2
    return img[y0 : y0 + ch, x0 : x0 + cw], (x0, y0)


def _dtft(win: np.ndarray, x0: int, y0: int, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Exact spectrum samples of the windowed crop at arbitrary frequencies.

    Coordinates are absolute image pixels so phases line up with the raster
    origin. Returns (len(fy), len(fx)) complex.
    """
    ys = y0 + np.arange(win.shape[0])
    xs = x0 + np.arange(win.shape[1])
    ey = np.exp(-2j * np.pi * np.outer(fy, ys))
    ex = np.exp(-2j * np.pi * np.outer(fx, xs))
    return ey @ win @ ex.T


def _carrier_centroid(mag2, fx, fy, g0, radius_f, iters=8):
    """Symmetry center of a spectral peak cluster.

    Scene content modulates each lattice carrier, spreading it into
    sidebands, but the magnitude field stays exactly symmetric about the
    carrier (the modulator is real), so the energy centroid of a window
    converges onto the carrier with no sideband bias.
    """
    g = np.array(g0, dtype=np.float64)
    dfx = fx[1] - fx[0]
    dfy = fy[1] - fy[0]
    rx = max(int(np.ceil(radius_f / dfx)), 2)
    ry = max(int(np.ceil(radius_f / dfy)), 2)
    for _ in range(iters):
        jx = int(round((g[0] - fx[0]) / dfx))
        jy = int(round((g[1] - fy[0]) / dfy))
        sx = slice(max(jx - rx, 0), min(jx + rx + 1, len(fx)))
        sy = slice(max(jy - ry, 0), min(jy + ry + 1, len(fy)))
        FXw, FYw = np.meshgrid(fx[sx], fy[sy])
        mask = (FXw - g[0]) ** 2 + (FYw - g[1]) ** 2 <= radius_f**2
        w = mag2[sy, sx] * mask
        tot = w.sum()
        if tot <= 0:
            break
        g_new = np.array([(w * FXw).sum() / tot, (w * FYw).sum() / tot])
        if np.hypot(*(g_new - g)) < 1e-4 * min(dfx, dfy):
            g = g_new
            break
        g = g_new
    return g


def _local_energy(mag2, fx, fy, g, radius_f):
    dfx = fx[1] - fx[0]
    dfy = fy[1] - fy[0]
    jx = int(round((g[0] - fx[0]) / dfx))
    jy = int(round((g[1] - fy[0]) / dfy))
    rx = max(int(np.ceil(radius_f / dfx)), 1)
    ry = max(int(np.ceil(radius_f / dfy)), 1)
    sx = slice(max(jx - rx, 0), min(jx + rx + 1, len(fx)))
    sy = slice(max(jy - ry, 0), min(jy + ry + 1, len(fy)))
    if sx.start >= sx.stop or sy.start >= sy.stop:
        return 0.0
    return float(mag2[sy, sx].sum())


def coarse_estimate(mono: LinearRaster, pattern: ScreenPattern, nominal_ppi: float) -> CoarseEstimate:
    """Find the screen lattice in the scan's spectrum.

    A windowed central crop is searched in an annulus around the spatial
    frequencies the nominal resolution implies.  The strongest peak is
    matched against the pattern's own harmonic structure (for checkerboard
    layouts the dominant peaks sit on the tile diagonal, for stripe layouts
    on the axis), which yields the full 2x2 lattice basis, the rotation, and
    the lattice phase from the complex peak arguments.
    """
    if mono.channels != 1:
        raise ValueError("coarse_estimate expects a 1-channel raster")
    if not nominal_ppi > 0:
        raise ValueError("nominal_ppi must be positive")
    period_nom = nominal_ppi * pattern.tile_period_mm / MM_PER_INCH
    crop, (x0, y0) = _central_crop(mono.samples.astype(np.float64), MAX_COARSE_CROP)
    win = (crop - crop.mean()) * _hann2d(*crop.shape)
    n_ref = min(crop.shape)

    F = np.fft.fft2(win)
    mag = np.abs(np.fft.fftshift(F))
    fy = np.fft.fftshift(np.fft.fftfreq(crop.shape[0]))
    fx = np.fft.fftshift(np.fft.fftfreq(crop.shape[1]))
    FX, FY = np.meshgrid(fx, fy)
    R = np.hypot(FX, FY)

    harmonics = _tile_harmonics(pattern)
    h_norms = [np.hypot(*h[0]) for h in harmonics]
    f_nom = 1.0 / period_nom
    lo = f_nom * min(h_norms) * (1.0 - CAPTURE_RANGE)
    hi = f_nom * max(h_norms) * (1.0 + CAPTURE_RANGE)
    annulus = (R >= max(lo, 3.0 / n_ref)) & (R <= min(hi, 0.48))
    if not annulus.any():
        raise NoPatternFound("nominal resolution leaves no searchable frequency band")

    vals = mag[annulus]
    mag2 = mag * mag
    f_tile_nom = 1.0 / period_nom
    radius_f = min(0.15 * f_tile_nom, 12.0 / n_ref)

    # candidate carriers: strongest separated annulus peaks, one half-plane.
    # Edge artifacts (plate borders, mark strips) can out-shine the lattice
    # at a single bin, so every candidate is scored against the full harmonic
    # structure rather than trusting the argmax alone.
    half_plane = annulus & ((FY > 0) | ((FY == 0) & (FX > 0)))
    work = np.where(half_plane, mag, 0.0)
    sep_bins = max(2, int(round(0.5 * radius_f * n_ref)))
    cand = []
    for _ in range(12):
        idx = int(np.argmax(work))
        py, px = np.unravel_index(idx, work.shape)
        if work[py, px] <= 0:
            break
        cand.append((float(mag[py, px]), (float(FX[py, px]), float(FY[py, px]))))
        work[
            max(py - sep_bins, 0) : py + sep_bins + 1,
            max(px - sep_bins, 0) : px + sep_bins + 1,
        ] = 0.0

    if not cand:
        raise NoPatternFound("no spectral peaks in the searchable band")
    ratio = cand[0][0] / max(float(np.median(vals)), 1e-30)
    confidence = float(np.clip((ratio - 4.0) / 26.0, 0.0, 1.0))
    if confidence < CONFIDENCE_THRESHOLD:
        raise NoPatternFound(
            f"no screen lattice in spectrum (peak-to-background {ratio:.2f}, "
            f"confidence {confidence:.3f})"
        )

    # each candidate peak could be any strong harmonic of the tile; the score
    # sums energy over every predicted harmonic, capping each term at twice
    # the weakest so one huge stray peak (plate edges, mark strips) cannot
    # buy out the missing rest
    hyps = []
    for peak_mag, f0 in cand:
        g_peak = _carrier_centroid(mag2, fx, fy, f0, radius_f)
        for (hx, hy), amp, w in harmonics:
            hnorm = np.hypot(hx, hy)
            f_tile = np.hypot(*g_peak) / hnorm
            if not (1.0 - CAPTURE_RANGE) <= f_tile * period_nom <= (1.0 + CAPTURE_RANGE):
                continue
            theta = np.arctan2(g_peak[1], g_peak[0]) - np.arctan2(hy, hx)
            rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
            energies = []
            for (qx, qy), _, wq in harmonics:
                g = f_tile * (rot @ [qx, qy])
                energies.append((wq, _local_energy(mag2, fx, fy, g, 0.5 * radius_f)))
            cap = 2.0 * min(e for _, e in energies)
            score = sum(wq * min(e, cap) for wq, e in energies)
            hyps.append((score, peak_mag, (hx, hy), f_tile, theta))
    if not hyps:
        raise NoPatternFound("spectral peaks are outside the plausible period range")
    # symmetric patterns let several harmonic assignments describe the same
    # lattice, all scoring alike; break near-ties toward the assignment whose
    # raw rotation is smallest so the basis lands in the canonical orientation
    sym = 360.0 / len(pattern.lattice_rotations_deg())
    score_max = max(h[0] for h in hyps)
    _, _, h_a, f_tile, theta = min(
        (h for h in hyps if h[0] >= 0.97 * score_max),
        key=lambda t: abs((np.degrees(t[4]) + 180.0) % 360.0 - 180.0),
    )

    # measure the anchor carrier and the strongest independent partner; the
    # basis comes from the two best-measured carriers, the rest only voted
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    g_a = np.array(_carrier_centroid(mag2, fx, fy, f_tile * (rot @ h_a), radius_f))
    partner = None
    for (hx, hy), amp, w in harmonics:
        if abs(h_a[0] * hy - h_a[1] * hx) >= 1:
            partner = (hx, hy)
            break
    S_a = _dtft(win, x0, y0, np.array([g_a[0]]), np.array([g_a[1]]))[0, 0]
    peaks = [(h_a, g_a, S_a)]
    if partner is not None:
        g_b = np.array(_carrier_centroid(mag2, fx, fy, f_tile * (rot @ partner), radius_f))
        S_b = _dtft(win, x0, y0, np.array([g_b[0]]), np.array([g_b[1]]))[0, 0]
        peaks.append((partner, g_b, S_b))
        Hc = np.array([peaks[0][0], peaks[1][0]], dtype=np.float64).T
        Gc = np.array([peaks[0][1], peaks[1][1]]).T
        B = Gc @ np.linalg.inv(Hc)  # maps harmonic index -> scan frequency
        A = np.linalg.inv(B).T  # scan px per unit tile step
    else:
        # stripe layouts have one independent direction; assume square tiles
        d = g_a / np.hypot(*g_a)
        period = np.hypot(*h_a) / np.hypot(*g_a)
        A = period * np.array([[d[0], -d[1]], [d[1], d[0]]])
        B = np.linalg.inv(A).T

    # confidence: how far the winning carrier stands above the typical band
    # level; the median is robust against edge and mark-strip streaks
    ix = int(np.clip(np.searchsorted(fx, g_a[0]), 3, len(fx) - 4))
    iy = int(np.clip(np.searchsorted(fy, g_a[1]), 3, len(fy) - 4))
    carrier_mag = float(mag[iy - 3 : iy + 4, ix - 3 : ix + 4].max())
    ratio = carrier_mag / max(float(np.median(vals)), 1e-30)
    confidence = float(np.clip((ratio - 4.0) / 26.0, 0.0, 1.0))

    period_est = float(np.sqrt(abs(np.linalg.det(A))))
    rotation = float(np.degrees(np.arctan2(A[1, 0], A[0, 0])))
    rotation = (rotation + sym / 2.0) % sym - sym / 2.0

    # lattice phase: arg S_h = arg T_h + 2*pi*h.u0 with u0 the tile coordinate
    # of the scan origin; T_h needs the unknown class luminosities, so solve
    # with a typical-ordering proxy and list the sign-flip alternates.  The
    # proxy must keep all three values distinct: equal red and blue would
    # zero the axis carriers of checkerboard layouts and leave their phase
    # arbitrary.  A wrong ordering only half-shifts u0, which the alternate
    # scoring recovers.
    lum_proxy = np.array([0.73, 0.40, 1.0])
    rows = []
    rhs = []
    for h, g, S in peaks:
        T = complex(np.dot(_harmonic_amp(harmonics, h), lum_proxy))
        beta = (np.angle(S) - np.angle(T if T != 0 else 1.0)) / (2 * np.pi)
        rows.append(h)
        rhs.append(beta)
    rowm = np.array(rows, dtype=np.float64)
    if len(rows) == 2:
        u0 = np.linalg.solve(rowm, np.array(rhs))
    else:
        h = rowm[0]
        u0 = rhs[0] * h / (h @ h)  # minimum-norm solution along the one direction
    u0 = u0 % 1.0
    phase_px = tuple((A @ u0 * -1.0).tolist())

    # each measured phase is only known up to a harmonic sign flip, and the
    # integer system h.u = beta (mod 1) has |det| solutions per sign combo;
    # list every candidate so the caller can score them on the image
    bases = []
    for s0 in (0.0, 0.5):
        for s1 in (0.0, 0.5) if len(rows) == 2 else (0.0,):
            shifted = np.array(rhs) + np.array([s0, s1])[: len(rows)]
            if len(rows) == 2:
                ua = np.linalg.solve(rowm, shifted) % 1.0
            else:
                h = rowm[0]
                ua = (shifted[0] * h / (h @ h)) % 1.0
            bases.append(ua)
    duals = [np.zeros(2)]
    if len(rows) == 2:
        for e in (np.array([1.0, 0.0]), np.array([0.0, 1.0])):
            d = np.linalg.solve(rowm, e) % 1.0
            if np.hypot(*np.minimum(d, 1.0 - d)) > 1e-6:
                duals.append(d)
    alternates = []
    seen = {tuple(np.round(u0, 3).tolist())}
    for ua in bases:
        for d in duals:
            cand = (ua + d) % 1.0
            key = tuple(np.round(cand, 3).tolist())
            if key in seen:
                continue
            seen.add(key)
            alternates.append(tuple(cand.tolist()))

    diagnostics = {
        "peak_table": [
            {
                "harmonic": tuple(map(int, h)),
                "freq": tuple(g.tolist()),
                "magnitude": float(np.abs(S)),
            }
            for h, g, S in peaks
        ],
        "peak_to_background": float(ratio),
        "symmetry_deg": sym,
        "phase_tile": tuple(u0.tolist()),
        "phase_alternates_tile": alternates,
        "crop_origin": (x0, y0),
    }
    return CoarseEstimate(
        period_px=period_est,
        rotation_deg=rotation,
        phase_px=phase_px,
        confidence=confidence,
        basis=tuple(map(tuple, A.tolist())),
        diagnostics=diagnostics,
    )


def _harmonic_amp(harmonics, h):
    for (hx, hy), amp, w in harmonics:
        if (hx, hy) == tuple(h):
            return amp
        if (hx, hy) == (-h[0], -h[1]):
            return np.conj(amp)
    return np.zeros(3, dtype=complex)


def map_from_coarse(
    est: CoarseEstimate,
    raster_shape: tuple,
    *,
    phase_tile: tuple = None,
) -> RegistrationMap:
    """Build a distortion-free map from a coarse estimate.

    phase_tile overrides the estimate's own phase (used when scoring the
    alternates the spectrum cannot distinguish).
    """
    A = np.array(est.basis, dtype=np.float64)
    if A.shape != (2, 2):
        A = est.period_px * np.array(
            [
                [np.cos(np.radians(est.rotation_deg)), -np.sin(np.radians(est.rotation_deg))],
                [np.sin(np.radians(est.rotation_deg)), np.cos(np.radians(est.rotation_deg))],
            ]
        )
    if phase_tile is None:
        t0 = np.array(est.phase_px)
    else:
        t0 = -A @ np.asarray(phase_tile, dtype=np.float64)
    h, w = raster_shape[0], raster_shape[1]
    H = np.array([[A[0, 0], A[0, 1], t0[0]], [A[1, 0], A[1, 1], t0[1]], [0.0, 0.0, 1.0]])
    return RegistrationMap(
        homography=H,
        k1=0.0,
        k2=0.0,
        principal_point=((w - 1) / 2.0, (h - 1) / 2.0),
        norm_radius_px=float(np.hypot(w, h) / 2.0),
    )


def default_windows(raster: LinearRaster, *, size: int = 256, grid: int = 3, margin: float = 0.05):
    """3x3 grid of square windows avoiding a border margin."""
    h, w = raster.height, raster.width
    size = int(min(size, (1 - 2 * margin) * w / grid, (1 - 2 * margin) * h / grid))
    size = max(size, 8)
    xs = np.linspace(margin * w, (1 - margin) * w - size, grid)
    ys = np.linspace(margin * h, (1 - margin) * h - size, grid)
    return [(int(round(x)), int(round(y)), size, size) for y in ys for x in xs]


def _check_windows(raster: LinearRaster, windows):
    if not windows:
        raise WindowsOutsideImage("no windows given")
    for x, y, w, h in windows:
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > raster.width or y + h > raster.height:
            raise WindowsOutsideImage(f"window {(x, y, w, h)} exceeds {raster.width}x{raster.height}")


def _windows_between_strips(corr, raster: LinearRaster, pattern: ScreenPattern):
    """Scoring windows inside the plate interior bounded by the mark strips.

    The strips themselves are far higher contrast than the scene and sit on
    their own 2D lattice, so windows that overlap them derail the separation
    objective; marks tell us exactly where the safe region is.
    """
    px_per_mm = raster.ppi / MM_PER_INCH
    tile_px = pattern.tile_period_mm * px_per_mm
    strip_half = 0.5 * pattern.marks.strip_width_mm * px_per_mm
    ys = np.array([p[1][1] for p in corr])
    top = np.array([p[0] for p in corr])[ys == ys.min()]
    bot = np.array([p[0] for p in corr])[ys == ys.max()]
    guard = strip_half + 2.0 * tile_px
    y0 = float(top[:, 1].max()) + guard
    y1 = float(bot[:, 1].min()) - guard
    xs = np.concatenate([top[:, 0], bot[:, 0]])
    inset = 0.5 * pattern.marks.disk_period_mm * px_per_mm
    x0 = max(float(xs.min()) + inset, 0.0)
    x1 = min(float(xs.max()) - inset, float(raster.width))
    size = int(round(np.clip(9.0 * tile_px, 48.0, 96.0)))
    if y1 - y0 < 2 * size or x1 - x0 < 3 * size:
        return default_windows(raster)
    nx = int(np.clip((x1 - x0) // (1.5 * size), 3, 8))
    ny = int(np.clip((y1 - y0) // (1.5 * size), 2, 6))
    wxs = np.linspace(x0, x1 - size, nx)
    wys = np.linspace(y0, y1 - size, ny)
    return [(int(round(x)), int(round(y)), size, size) for y in wys for x in wxs]


def _screened_windows(mono: LinearRaster, est, pattern: ScreenPattern):
    """Scoring windows placed where the screen carrier actually rings.

    Margins, plate borders and other unscreened content wreck the
    separation objective, so a candidate grid is rated by the local
    response at the measured carrier frequencies and only windows near
    the best response survive.
    """
    size = int(np.clip(10.0 * est.period_px, 64.0, 256.0))
    h, w = mono.height, mono.width
    if h < size / 0.94 or w < size / 0.94:
        return default_windows(mono)
    freqs = [np.array(p["freq"]) for p in est.diagnostics["peak_table"]]
    xs = np.linspace(0.03 * w, 0.97 * w - size, 5)
    ys = np.linspace(0.03 * h, 0.97 * h - size, 5)
    yy, xx = np.mgrid[0:size, 0:size]
    waves = [np.exp(-2j * np.pi * (g[0] * xx + g[1] * yy)) for g in freqs]
    cands = []
    for y in ys:
        for x in xs:
            xi, yi = int(round(x)), int(round(y))
            win = mono.samples[yi : yi + size, xi : xi + size].astype(np.float64)
            win = win - win.mean()
            rms = float(np.sqrt((win**2).mean()))
            if rms <= 1e-12:
                continue
            resp = sum(abs((win * p).sum()) for p in waves) / (win.size * rms)
            cands.append((resp, (xi, yi, size, size)))
    if not cands:
        return default_windows(mono)
    cands.sort(key=lambda t: -t[0])
    best = cands[0][0]
    # scene content moves the response over a wide range inside the plate;
    # margins sit far below a tenth of the best window
    keep = [wdw for r, wdw in cands if r >= 0.12 * best][:9]
    if len(keep) < 4:
        keep = [wdw for _, wdw in cands[:4]]
    return keep


class _WindowSamples:
    """Pixel coordinates and values of every scoring window, flattened once
    so each objective evaluation is a handful of array passes."""

    def __init__(self, mono: LinearRaster, windows):
        coords = []
        values = []
        win_id = []
        for i, (x, y, w, h) in enumerate(windows):
            qx, qy = np.meshgrid(
                x + np.arange(w, dtype=np.float64), y + np.arange(h, dtype=np.float64)
            )
            coords.append(np.stack([qx, qy], axis=-1).reshape(-1, 2))
            values.append(mono.samples[y : y + h, x : x + w].astype(np.float64).reshape(-1))
            win_id.append(np.full(w * h, i, dtype=np.int64))
        self.coords = np.concatenate(coords)
        self.values = np.concatenate(values)
        self.win_id = np.concatenate(win_id)
        self.n_windows = len(windows)


def _score_samples(samples: _WindowSamples, pattern: ScreenPattern, m: RegistrationMap) -> float:
    n = pattern.patches_per_tile
    table = pattern.class_table()
    p, valid = scan_to_screen(m, samples.coords, return_valid=True)
    vals = samples.values
    wid = samples.win_id
    if not valid.all():
        p, vals, wid = p[valid], vals[valid], wid[valid]
        if len(p) == 0:
            return 0.0
        # windows drained by the valid mask would corrupt the segment sums
        present = np.unique(wid)
        wid = np.searchsorted(present, wid)
        n_windows = len(present)
    else:
        n_windows = samples.n_windows
    gx = np.floor(p[:, 0] * n).astype(np.int64)
    gy = np.floor(p[:, 1] * n).astype(np.int64)
    wt = np.maximum(0.0, 1.0 - 2.0 * np.abs(p[:, 0] * n - gx - 0.5)) * np.maximum(
        0.0, 1.0 - 2.0 * np.abs(p[:, 1] * n - gy - 0.5)
    )
    cls = table[gy % n, gx % n]

    # per-window-local patch key keeps the bin table small
    order_starts = np.searchsorted(wid, np.arange(n_windows))
    gx_min = np.minimum.reduceat(gx, order_starts)
    gy_min = np.minimum.reduceat(gy, order_starts)
    lx = gx - gx_min[wid]
    ly = gy - gy_min[wid]
    span_x = int(np.max(np.maximum.reduceat(gx, order_starts) - gx_min)) + 1
    span_y = int(np.max(np.maximum.reduceat(gy, order_starts) - gy_min)) + 1
    stride = span_x * span_y
    key = wid * stride + ly * span_x + lx
    size = n_windows * stride
    wsum = np.bincount(key, weights=wt, minlength=size)
    vsum = np.bincount(key, weights=wt * vals, minlength=size)
    bin_cls = np.full(size, -1, dtype=np.int64)
    bin_cls[key] = cls
    bin_win = np.arange(size) // stride

    ok = wsum > 0.05
    if not ok.any():
        return 0.0
    mean = vsum[ok] / wsum[ok]
    w_ok = wsum[ok]
    group = bin_win[ok] * 3 + bin_cls[ok]
    gsize = n_windows * 3
    Sw = np.bincount(group, weights=w_ok, minlength=gsize).reshape(-1, 3)
    Sm = np.bincount(group, weights=w_ok * mean, minlength=gsize).reshape(-1, 3)
    Sq = np.bincount(group, weights=w_ok * mean * mean, minlength=gsize).reshape(-1, 3)
    n_patches = np.bincount(bin_win[ok], minlength=n_windows)

    wtot = Sw.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(wtot > 0, Sw / wtot, 0.0)
        mu = np.where(Sw > 0, Sm / np.maximum(Sw, 1e-300), 0.0)
        # within-class variance of the patch means, not of raw pixels
        var_means = np.where(Sw > 0, Sq / np.maximum(Sw, 1e-300) - mu**2, 0.0)
    var_means = np.maximum(var_means, 0.0)
    mu_bar = (frac * mu).sum(axis=1, keepdims=True)
    between = (frac * (mu - mu_bar) ** 2).sum(axis=1)
    within = (frac * var_means).sum(axis=1)
    usable = n_patches >= 6
    score = np.where(usable, between / (within + 1e-9 * between + 1e-30), 0.0)
    return float(score.sum())


def separation_score(
    mono: LinearRaster, pattern: ScreenPattern, m: RegistrationMap, windows
) -> float:
    """Between-class variance of class means over within-class variance of
    patch means, summed over windows.  Invariant to scaling the raster."""
    return _score_samples(_WindowSamples(mono, windows), pattern, m)


def _map_from_params(base: dict, p: np.ndarray, steps: np.ndarray) -> RegistrationMap:
    d = np.zeros(6)
    d[: len(p)] = p * steps[: len(p)]
    return compose_map(
        rotation_deg=base["rotation_deg"] + d[2],
        scale_x_px=base["scale_x_px"] * np.exp(d[3]),
        scale_y_px=base["scale_y_px"] * np.exp(d[3]),
        skew_px=base["skew_px"] + d[4],
        dx_px=base["dx_px"] + d[0],
        dy_px=base["dy_px"] + d[1],
        perspective_x=base["perspective_x"],
        perspective_y=base["perspective_y"],
        k1=base["k1"] + d[5],
        k2=base["k2"],
        principal_point=base["principal_point"],
        norm_radius_px=base["norm_radius_px"],
    )


def refine_registration(
    mono: LinearRaster,
    pattern: ScreenPattern,
    initial: RegistrationMap,
    windows,
    *,
    fit_distortion: bool = True,
    return_info: bool = False,
):
    """Polish a map by maximizing class separation of collected patch means.

    Simplex search over translation, rotation, log-period, skew, and (with
    fit_distortion) the leading radial term, walled into a trust region
    around the initial map (REFINE_TRUST, the capture range); deterministic
    (fixed start simplex, iteration cap 500, objective tolerance 1e-3).  On
    hitting the cap the best map found is attached to the NotConverged error.
    """
    _check_windows(mono, windows)
    base = decompose_map(initial)
    base["principal_point"] = initial.principal_point
    base["norm_radius_px"] = initial.norm_radius_px
    patch_px = abs(base["scale_x_px"]) / pattern.patches_per_tile
    steps = np.array(
        [
            0.3 * patch_px,
            0.3 * patch_px,
            0.15,
            0.003,
            0.003 * abs(base["scale_x_px"]),
            0.005,
        ]
    )
    bounds = np.array(
        [
            REFINE_TRUST[0] * patch_px,
            REFINE_TRUST[1] * patch_px,
            REFINE_TRUST[2],
            REFINE_TRUST[3],
            REFINE_TRUST[4] * abs(base["scale_x_px"]),
            REFINE_TRUST[5],
        ]
    )
    ndim = 6 if fit_distortion else 5
    steps = steps[:ndim]
    bounds = bounds[:ndim]
    samples = _WindowSamples(mono, windows)
    trace = []
    best = {"score": -np.inf, "x": np.zeros(ndim)}

    def neg_objective(x):
        worst = float(np.max(np.abs(x * steps) / bounds))
        if worst > 1.0:
            # graded wall so reflections know which way back in is
            return 1e6 * worst
        m = _map_from_params(base, x, steps)
        s = _score_samples(samples, pattern, m)
        if s > best["score"]:
            best["score"] = s
            best["x"] = x.copy()
        trace.append(s)
        return -s

    x0 = np.zeros(ndim)
    s0 = -neg_objective(x0)
    simplex = np.vstack([x0] + [x0 + np.eye(ndim)[i] for i in range(ndim)])
    res = minimize(
        neg_objective,
        x0,
        method="Nelder-Mead",
        options={
            "maxiter": REFINE_MAX_ITER,
            "fatol": REFINE_FTOL,
            "xatol": 0.02,
            "initial_simplex": simplex,
            "adaptive": False,
        },
    )
    # a gain below the convergence tolerance is indistinguishable from
    # optimizer noise: stand pat so an already-optimal start is a fixed point
    stood = best["score"] - s0 <= REFINE_FTOL
    if stood:
        best = {"score": s0, "x": x0}
    final = initial if stood else _map_from_params(base, best["x"], steps)
    info = {
        "objective": best["score"],
        "evaluations": len(trace),
        "iterations": int(res.nit),
        "trace": trace,
        "converged": bool(res.success),
    }
    if not res.success:
        err = NotConverged(
            f"refinement hit the iteration cap at objective {best['score']:.4g}"
        )
        err.best_map = final
        err.diagnostics = info
        raise err
    return (final, info) if return_info else final


def _marks_residual_patches(corr, m: RegistrationMap, pattern: ScreenPattern) -> float:
    """Mean distance (in patches) between detected mark screen labels and
    where the map sends the detected scan centers."""
    scan = np.asarray([c[0] for c in corr], dtype=np.float64)
    scr = np.asarray([c[1] for c in corr], dtype=np.float64)
    p, ok = scan_to_screen(m, scan, return_valid=True)
    if not ok.any():
        return float("inf")
    d = (p[ok] - scr[ok]) * pattern.patches_per_tile
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


def _disk_template(radius_px: float) -> np.ndarray:
    r = max(radius_px, 1.0)
    half = int(np.ceil(r + 1.5))
    y, x = np.mgrid[-half : half + 1, -half : half + 1]
    disk = np.clip(r + 0.5 - np.hypot(x, y), 0.0, 1.0)
    return disk


def _strip_peaks(ncc: np.ndarray, band: slice, spacing_px: float, threshold: float):
    """Greedy non-max suppression of |response| peaks inside a row band."""
    sub = np.abs(ncc[band])
    y_off = band.start or 0
    peaks = []
    work = sub.copy()
    guard = int(max(2, round(spacing_px / 2)))
    while True:
        idx = np.argmax(work)
        py, px = np.unravel_index(idx, work.shape)
        if work[py, px] < threshold:
            break
        peaks.append((px, py + y_off, float(np.sign(ncc[py + y_off, px]))))
        work[
            max(0, py - guard) : py + guard + 1, max(0, px - guard) : px + guard + 1
        ] = 0.0
    return peaks


def _disk_centroid(img: np.ndarray, x0: float, y0: float, r_px: float, spacing_px: float, dark: bool):
    """Subpixel disk center from the intensity centroid, re-centered until
    the sampling window is symmetric about the answer."""
    rw = min(1.3 * r_px, 0.5 * spacing_px - 1.0)
    half = int(np.ceil(rw)) + 1
    cx, cy = float(x0), float(y0)
    H, W = img.shape
    for _ in range(4):
        ix, iy = int(round(cx)), int(round(cy))
        if not (half <= ix < W - half and half <= iy < H - half):
            return float(x0), float(y0)
        sub = img[iy - half : iy + half + 1, ix - half : ix + half + 1]
        yy, xx = np.mgrid[-half : half + 1, -half : half + 1]
        mask = (xx + ix - cx) ** 2 + (yy + iy - cy) ** 2 <= rw * rw
        lo, hi = np.percentile(sub[mask], [10.0, 90.0])
        if hi - lo < 1e-6:
            return cx, cy
        w = np.clip(((hi - sub) if dark else (sub - lo)) / (hi - lo), 0.0, 1.0) * mask
        tot = w.sum()
        if tot <= 0:
            return cx, cy
        nx = float((w * (xx + ix)).sum() / tot)
        ny = float((w * (yy + iy)).sum() / tot)
        if np.hypot(nx - cx, ny - cy) < 1e-3:
            cx, cy = nx, ny
            break
        cx, cy = nx, ny
    return cx, cy


def detect_registration_marks(raster: LinearRaster, pattern: ScreenPattern):
    """Find the edge disk strips and index them in screen coordinates.

    Matched filter (normalized correlation against an ideal disk) in the top
    and bottom quarters, peaks indexed by their measured spacing so missing
    disks leave gaps, a shared x origin for both strips, and the strip
    separation in whole tiles from the measured spacing.  Fewer than 3 disks
    on either strip returns an empty list.
    """
    if pattern.marks is None:
        raise NoMarksSpec(f"pattern {pattern.process_id!r} has no registration marks")
    if raster.channels != 1:
        raise ValueError("detect_registration_marks expects a 1-channel raster")
    marks = pattern.marks
    px_per_mm = raster.ppi / MM_PER_INCH
    r_px = marks.disk_radius_mm * px_per_mm
    spacing_px = marks.disk_period_mm * px_per_mm
    tile_px = pattern.tile_period_mm * px_per_mm
    img = raster.samples.astype(np.float64)

    t = _disk_template(r_px)
    t0 = t - t.mean()
    num = fftconvolve(img, t0[::-1, ::-1], mode="same")
    local_mean = uniform_filter(img, size=t.shape[0])
    local_sq = uniform_filter(img * img, size=t.shape[0])
    local_var = np.maximum(local_sq - local_mean**2, 0.0) * t.size
    # variance floor keeps flat regions from dividing to huge responses
    var_floor = (0.02**2) * t.size
    ncc = num / np.sqrt((local_var + var_floor) * (t0**2).sum())
    # matched-filter support must fit inside the image
    half = t.shape[0] // 2
    ncc[:half, :] = 0.0
    ncc[-half:, :] = 0.0
    ncc[:, :half] = 0.0
    ncc[:, -half:] = 0.0

    band_h = int(min(max(4 * tile_px, 2.5 * marks.strip_width_mm * px_per_mm), 0.25 * raster.height))
    strips = []
    for band in (slice(0, band_h), slice(raster.height - band_h, raster.height)):
        pts = _strip_peaks(ncc, band, spacing_px, MARK_NCC_THRESHOLD)
        if len(pts) < 3:
            return []
        # a strip is all one polarity; drop minority-sign responses
        signs = np.array([s for _, _, s in pts])
        major = 1.0 if (signs > 0).sum() >= (signs < 0).sum() else -1.0
        pts = [p for p in pts if p[2] == major]
        if len(pts) < 3:
            return []
        # the correlation peak is too broad for 3x3 interpolation; the
        # intensity centroid of the disk itself localizes much tighter
        dark = major < 0
        xy = np.array([_disk_centroid(img, x, y, r_px, spacing_px, dark) for x, y, s in pts])
        # keep the dominant collinear run: fit a line, reject outliers once
        coef = np.polyfit(xy[:, 0], xy[:, 1], 1)
        resid = np.abs(np.polyval(coef, xy[:, 0]) - xy[:, 1])
        keep = resid < max(2.0, float(3.0 * np.median(resid)))
        if keep.sum() < 3:
            return []
        xy = xy[keep]
        coef = np.polyfit(xy[:, 0], xy[:, 1], 1)
        xy = xy[np.argsort(xy[:, 0])]
        d = np.diff(xy[:, 0])
        plausible = d[(d > 0.6 * spacing_px) & (d < 1.4 * spacing_px)]
        pitch = float(np.median(plausible)) if len(plausible) else spacing_px
        # integer index per disk; gaps from missed disks stay gaps
        j = np.concatenate([[0], np.cumsum(np.maximum(1, np.round(d / pitch)))])
        # least-squares pitch over the whole run is steadier than one median
        if j[-1] > 0:
            pitch = float(np.polyfit(j, xy[:, 0], 1)[0])
        strips.append({"xy": xy, "j": j, "slope": float(coef[0]), "pitch": pitch})

    top, bot = strips
    pitch = 0.5 * (top["pitch"] + bot["pitch"])
    slope = 0.5 * (top["slope"] + bot["slope"])
    period_tiles = marks.disk_period_mm / pattern.tile_period_mm
    # measured pitch fixes the true scale; round the strip gap to whole tiles
    tile_px_meas = pitch / period_tiles
    xt0, yt0 = top["xy"][0]
    dy_gap = float(
        np.median(bot["xy"][:, 1])
        - (yt0 + top["slope"] * (np.median(bot["xy"][:, 0]) - xt0))
    )
    gap_tiles = int(round(dy_gap / (tile_px_meas * np.cos(np.arctan(slope)))))

    corr = []
    for strip, y_tiles in ((top, 0), (bot, gap_tiles)):
        for (x, y) in strip["xy"]:
            # shared x gauge: project onto the top strip's first disk
            j = (x - (xt0 - slope * (y - yt0))) / pitch
            corr.append(((float(x), float(y)), (float(round(j) * period_tiles), float(y_tiles))))
    return corr


def register_auto(
    mono: LinearRaster,
    pattern: ScreenPattern,
    nominal_ppi: float,
    *,
    windows=None,
    return_info: bool = False,
):
    """Full estimator: coarse spectrum fit, marks if the pattern has them,
    then refinement; phase and symmetry alternates are scored and the best
    refined candidate wins (ties toward the smallest rotation)."""
    est = coarse_estimate(mono, pattern, nominal_ppi)

    marks_corr = []
    if pattern.marks is not None:
        try:
            marks_corr = detect_registration_marks(mono, pattern)
        except NoMarksSpec:  # pragma: no cover - guarded above
            marks_corr = []

    if windows is None:
        if len(marks_corr) >= 8:
            windows = _windows_between_strips(marks_corr, mono, pattern)
        else:
            windows = _screened_windows(mono, est, pattern)
    _check_windows(mono, windows)

    candidates = []
    marks_map = None
    if len(marks_corr) >= 8:
        fr = fit_map([(scr, scan) for scan, scr in marks_corr], fit_distortion=False)
        marks_map = fr.map
        candidates.append(fr.map)
    else:
        phases = [tuple(est.diagnostics["phase_tile"])]
        phases += [tuple(p) for p in est.diagnostics["phase_alternates_tile"]]
        seen = set()
        for ph in phases:
            key = (round(ph[0] % 1.0, 3), round(ph[1] % 1.0, 3))
            if key in seen:
                continue
            seen.add(key)
            base = map_from_coarse(est, (mono.height, mono.width), phase_tile=ph)
            candidates.append(base)
            # color assignment permutes under the lattice symmetry; relabeled
            # bases are scored on the image like any other candidate
            for ang in pattern.lattice_rotations_deg():
                if ang % 360.0 == 0.0:
                    continue
                c, s = np.cos(np.radians(ang)), np.sin(np.radians(ang))
                R = np.round(np.array([[c, -s], [s, c]]), 12)
                H = base.homography.copy()
                H[:2, :2] = H[:2, :2] @ R
                candidates.append(
                    RegistrationMap(
                        homography=H,
                        k1=base.k1,
                        k2=base.k2,
                        principal_point=base.principal_point,
                        norm_radius_px=base.norm_radius_px,
                    )
                )

    scored = []
    for cand in candidates:
        scored.append(
            (
                separation_score(mono, pattern, cand, windows),
                abs(decompose_map(cand)["rotation_deg"]),
                cand,
            )
        )
    smax = max(s for s, _, _ in scored)
    # equivalent relabels score identically; prefer the small-rotation ones
    scored.sort(key=lambda t: (-round(t[0] / max(0.01 * smax, 1e-12)), t[1]))
    keep = [c for _, _, c in scored[: max(1, 2 if len(marks_corr) < 8 else 1)]]

    results = []
    for cand in keep:
        try:
            m, info = refine_registration(
                mono, pattern, cand, windows, fit_distortion=False, return_info=True
            )
        except NotConverged as e:
            m, info = e.best_map, e.diagnostics
        results.append((info["objective"], abs(decompose_map(m)["rotation_deg"]), m, info))
    # objectives within 1% are a tie (optimizer noise); smallest rotation wins
    best_obj = max(r[0] for r in results)
    objective, _, final, info = min(
        (r for r in results if r[0] >= 0.99 * best_obj), key=lambda t: t[1]
    )

    # radial distortion is nearly unobservable from a handful of windows and
    # trades against scale, so the released fit must earn its extra term
    try:
        m2, info2 = refine_registration(
            mono, pattern, final, windows, fit_distortion=True, return_info=True
        )
    except NotConverged as e:
        m2, info2 = e.best_map, e.diagnostics
    if info2["objective"] >= 1.03 * objective:
        final, info, objective = m2, info2, info2["objective"]
    full_info = {
        "coarse": est,
        "marks_found": len(marks_corr),
        "objective": objective,
        "refine": info,
        "candidates_scored": len(candidates),
    }
    if marks_map is not None:
        r = _marks_residual_patches(marks_corr, final, pattern)
        full_info["marks_residual_patches"] = r
        if r > MARKS_RESIDUAL_LIMIT:
            # the windows misled the polish; the physical fiducials win
            final = marks_map
            full_info["objective"] = separation_score(mono, pattern, final, windows)
            full_info["marks_residual_patches"] = _marks_residual_patches(
                marks_corr, final, pattern
            )
    return (final, full_info) if return_info else final
