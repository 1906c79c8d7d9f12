"""Shared fixtures and oracles for the test suite."""
import numpy as np
import pytest

from rescreen.geometry import scan_to_screen
from rescreen.screen import pattern_preset
from rescreen.simulate import make_plate


def class_safe_ops(pattern):
    """Lattice symmetries that relabel the class table onto itself (allowing
    a global R<->B swap, which a mono scan cannot pin down without marks).

    Returns (R, t) pairs acting on screen coordinates: p' = R p + t.  Any
    recovered map equal to the truth up to one of these is a correct
    registration of the color lattice.
    """
    n = pattern.patches_per_tile
    table = pattern.class_table()
    perms = [np.array([0, 1, 2]), np.array([2, 1, 0])]
    idx = np.stack(np.meshgrid(np.arange(n), np.arange(n), indexing="ij"), -1)
    centers = (idx[..., ::-1] + 0.5) / n
    ops = []
    for k in range(4):
        a = np.radians(90.0 * k)
        R = np.round(np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]), 12)
        for fx in np.arange(n) / n:
            for fy in np.arange(n) / n:
                t = np.array([fx, fy])
                src = centers.reshape(-1, 2) @ R.T + t
                j2 = np.floor(src[:, 0] % 1.0 * n).astype(int)
                i2 = np.floor(src[:, 1] % 1.0 * n).astype(int)
                mapped = table[i2, j2]
                orig = table[idx[..., 0].ravel(), idx[..., 1].ravel()]
                for perm in perms:
                    if np.array_equal(perm[orig], mapped):
                        ops.append((R, t))
                        break
    return ops


def gauge_patch_error(est_map, true_map, pattern, shape, ops=None):
    """Mean patch-center disagreement between two maps over the scan
    interior, minimized over the class-safe symmetry group.

    Scan pixels on a coarse grid are sent through both maps; a residual
    constant offset (whole patches of slack the lattice cannot see) is
    removed by the median before averaging distances.
    """
    if ops is None:
        ops = class_safe_ops(pattern)
    h, w = shape
    n = pattern.patches_per_tile
    xs = np.linspace(0.1 * w, 0.9 * w, 12)
    ys = np.linspace(0.1 * h, 0.9 * h, 12)
    gx, gy = np.meshgrid(xs, ys)
    q = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    pe, ve = scan_to_screen(est_map, q, return_valid=True)
    pt, vt = scan_to_screen(true_map, q, return_valid=True)
    ok = ve & vt
    pe, pt = pe[ok], pt[ok]
    best = np.inf
    for R, t in ops:
        d = (pe - (pt @ R.T + t)) * n
        d = d - np.round(np.median(d, axis=0))
        best = min(best, float(np.mean(np.hypot(d[:, 0], d[:, 1]))))
    return best


@pytest.fixture(scope="session")
def paget():
    return pattern_preset("paget")


@pytest.fixture(scope="session")
def finlay():
    return pattern_preset("finlay")


@pytest.fixture(scope="session")
def small_plate(paget):
    """One mid-size synthetic Paget negative with a little of everything."""
    return make_plate(
        paget,
        1800,
        40,
        32,
        rotation_deg=0.7,
        scale_error=0.004,
        phase_tiles=(0.3, 0.6),
        margin_mm=2.0,
        noise_sigma=0.01,
        seed=5,
    )


@pytest.fixture(scope="session")
def marked_plate(finlay):
    return make_plate(
        finlay,
        1800,
        36,
        30,
        rotation_deg=0.8,
        scale_error=0.003,
        phase_tiles=(0.2, 0.7),
        margin_mm=2.5,
        noise_sigma=0.01,
        with_marks=True,
        seed=5,
    )
