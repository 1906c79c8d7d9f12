import csv
import importlib.resources as resources

import numpy as np
import pytest

from rescreen.colorimetry import (
    SRGB_D65,
    auto_white_balance,
    bradford_adaptation,
    cie_1931_observer,
    display_to_xyz,
    dye_to_xyz_matrix,
    illuminant,
    process_to_display_matrix,
    rgb_to_xyz_matrix,
    white_point_xyz,
    xyz_to_display,
)
from rescreen.errors import BlackRegion, GridMismatch
from rescreen.spectra import WORKING_GRID, DyeSet, SpectralCurve, ideal_dyes

# Published chromaticities for the bundled illuminants (2-degree observer).
PUBLISHED_XY = {"D50": (0.3457, 0.3585), "D65": (0.3127, 0.3290)}


def _read_csv(name):
    ref = resources.files("rescreen") / "data" / "cie" / name
    rows = []
    with ref.open(encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if row and not row[0].lstrip().startswith("#"):
                rows.append([float(x) for x in row])
    return np.array(rows)


def _oracle_matrix(illum_name, bands, fractions):
    """Straight-line reimplementation: per-column 5 nm summation over the
    bundled tables, normalized so the fraction-weighted white has Y = 1."""
    obs_t = _read_csv("cie1931_observer_2deg.csv")
    grid = obs_t[:, 0]
    obs = obs_t[:, 1:4].T
    if illum_name == "equal_energy":
        power = np.full(grid.shape, 100.0)
    else:
        it = _read_csv(f"illuminant_{illum_name.lower()}.csv")
        power = np.interp(grid, it[:, 0], it[:, 1])
    M = np.empty((3, 3))
    for c, (lo, hi) in enumerate(bands):
        mask = (grid >= lo) & (grid < hi)
        M[:, c] = (obs[:, mask] * power[mask]).sum(axis=1) * 5.0
    f = np.asarray(fractions) / np.sum(fractions)
    return M / (M @ f)[1]


@pytest.mark.parametrize("name", ["D50", "D65", "equal_energy"])
@pytest.mark.parametrize("fractions", [(1, 1, 1), (0.25, 0.5, 0.25)])
def test_block_dye_matrix_against_summation(name, fractions):
    bands = [(600.0, 700.0), (500.0, 600.0), (400.0, 500.0)]
    want = _oracle_matrix(name, bands, fractions)
    got = dye_to_xyz_matrix(ideal_dyes(), illuminant(name), cie_1931_observer(), fractions)
    assert np.max(np.abs(got - want) / np.max(np.abs(want))) < 1e-9


@pytest.mark.parametrize("name", ["D50", "D65"])
def test_clear_dyes_keep_illuminant_chromaticity(name):
    ones = SpectralCurve(WORKING_GRID, np.ones(WORKING_GRID.shape))
    clear = DyeSet(curves={"R": ones, "G": ones, "B": ones}, provenance="test")
    M = dye_to_xyz_matrix(clear, illuminant(name), cie_1931_observer())
    white = M @ np.full(3, 1 / 3)
    xy = white[:2] / white.sum()
    assert abs(xy[0] - PUBLISHED_XY[name][0]) < 1e-3
    assert abs(xy[1] - PUBLISHED_XY[name][1]) < 1e-3


@pytest.mark.parametrize("name", ["D50", "D65"])
def test_white_point_matches_published(name):
    w = white_point_xyz(illuminant(name), cie_1931_observer())
    assert w[1] == pytest.approx(1.0, abs=1e-12)
    xy = w[:2] / w.sum()
    assert abs(xy[0] - PUBLISHED_XY[name][0]) < 1e-3
    assert abs(xy[1] - PUBLISHED_XY[name][1]) < 1e-3


def test_equal_energy_white_is_flat():
    w = white_point_xyz(illuminant("equal_energy"), cie_1931_observer())
    xy = w[:2] / w.sum()
    assert abs(xy[0] - 1 / 3) < 2e-3
    assert abs(xy[1] - 1 / 3) < 2e-3


def test_unknown_illuminant():
    with pytest.raises(ValueError):
        illuminant("D55")


def test_observer_grid_mismatch():
    short = SpectralCurve(np.arange(400.0, 700.0, 5.0), np.ones(60))
    with pytest.raises(GridMismatch):
        short.resample(WORKING_GRID)


def test_rgb_matrix_white_row():
    M = rgb_to_xyz_matrix(SRGB_D65)
    white = M @ np.ones(3)
    xy = white[:2] / white.sum()
    assert xy == pytest.approx(SRGB_D65.white_xy, abs=1e-12)
    assert white[1] == pytest.approx(1.0, abs=1e-12)


def test_display_round_trip():
    rng = np.random.default_rng(0)
    rgb = rng.uniform(0.05, 0.95, size=(50, 3))
    back = xyz_to_display(display_to_xyz(rgb))
    assert np.max(np.abs(back - rgb)) < 1e-12


def test_bradford_maps_white_exactly():
    d50 = white_point_xyz(illuminant("D50"), cie_1931_observer())
    d65 = white_point_xyz(illuminant("D65"), cie_1931_observer())
    got = bradford_adaptation(d50, d65) @ d50
    assert np.max(np.abs(got - d65)) < 1e-12
    ident = bradford_adaptation(d65, d65)
    assert np.max(np.abs(ident - np.eye(3))) < 1e-12


def test_xyz_to_display_clamps_and_counts():
    xyz = np.array([[2.0, 2.0, 2.0], [0.2, 0.2, 0.2]])
    rgb, frac = xyz_to_display(xyz, return_stats=True)
    assert np.all(rgb <= 1.0) and np.all(rgb >= 0.0)
    assert frac == pytest.approx(0.5)


def test_process_matrix_unexposed_is_display_white():
    for fractions in [(1, 1, 1), (0.25, 0.5, 0.25)]:
        M = process_to_display_matrix(
            ideal_dyes(), illuminant("D50"), cie_1931_observer(), fractions
        )
        white = M @ np.ones(3)
        assert np.max(np.abs(white - 1.0)) < 1e-10


def test_auto_white_balance_equalizes():
    img = np.zeros((20, 20, 3))
    img[..., 0] = 0.5
    img[..., 1] = 0.25
    img[..., 2] = 0.125
    gains = auto_white_balance(img, (2, 2, 10, 10))
    balanced = img[2:12, 2:12] * gains
    means = balanced.reshape(-1, 3).mean(axis=0)
    assert np.ptp(means) < 1e-12


def test_auto_white_balance_guards():
    img = np.full((20, 20, 3), 0.5)
    with pytest.raises(ValueError):
        auto_white_balance(img, (15, 15, 10, 10))
    with pytest.raises(ValueError):
        auto_white_balance(img, (0, 0, 4, 4))
    dark = np.zeros((20, 20, 3))
    with pytest.raises(BlackRegion):
        auto_white_balance(dark, (0, 0, 10, 10))
