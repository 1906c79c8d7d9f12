import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rescreen.errors import BadPattern, BelowNyquist, UnknownProcess
from rescreen.screen import (
    ScreenPattern,
    color_at,
    load_pattern,
    min_ppi,
    pattern_from_dict,
    pattern_preset,
)

PRESETS = ("paget", "finlay", "thames", "joly", "dufay")


def test_presets_load():
    for pid in PRESETS:
        pat = pattern_preset(pid)
        assert pat.process_id == pid
        assert pat.patches_per_tile >= 1
        f = pat.class_fractions()
        assert f.shape == (3,) and abs(f.sum() - 1.0) < 1e-12
        assert np.all(f > 0)


def test_unknown_preset():
    with pytest.raises(UnknownProcess):
        pattern_preset("autochrome")


def test_min_ppi_scales_linearly(paget):
    # 0.1 mm patches: 2 px needs 508, 8 px needs 2032
    assert min_ppi(paget, 2) == pytest.approx(508.0, abs=1e-9)
    assert min_ppi(paget, 8) == pytest.approx(2032.0, abs=1e-9)
    assert min_ppi(paget, 4) == pytest.approx(2 * min_ppi(paget, 2))


def test_min_ppi_refuses_undersampling(paget):
    with pytest.raises(BelowNyquist):
        min_ppi(paget, 1.9)


def test_paget_layout(paget):
    assert paget.patches_per_tile == 2
    assert paget.class_fractions() == pytest.approx([0.25, 0.5, 0.25])
    table = paget.class_table()
    assert table.tolist() == [[0, 1], [1, 2]]
    # table agrees with the polygon classifier at patch centers
    assert color_at(paget, (0.25, 0.25)) == "R"
    assert color_at(paget, (0.75, 0.25)) == "G"
    assert color_at(paget, (0.25, 0.75)) == "G"
    assert color_at(paget, (0.75, 0.75)) == "B"


def test_classify_points_periodic(paget):
    rng = np.random.default_rng(9)
    pts = rng.uniform(-3, 3, size=(300, 2))
    cls = paget.classify_points(pts)
    shifted = paget.classify_points(pts + np.array([2.0, -5.0]))
    assert np.array_equal(cls, shifted)


def test_classify_boundary_stable(paget):
    # half-open membership: repeated evaluation never flickers
    pts = np.array([[0.5, 0.25], [0.25, 0.5], [0.5, 0.5], [0.0, 0.0]])
    a = paget.classify_points(pts)
    b = paget.classify_points(pts)
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1, allow_nan=False), st.floats(0, 1, allow_nan=False))
def test_color_at_matches_table(u, v):
    pat = pattern_preset("paget")
    n = pat.patches_per_tile
    table = pat.class_table()
    i = min(int(v * n), n - 1)
    j = min(int(u * n), n - 1)
    # sample at the containing patch center so boundaries are unambiguous
    center = ((j + 0.5) / n, (i + 0.5) / n)
    assert color_at(pat, center) == "RGB"[table[i, j]]


def _paget_dict():
    return {
        "process_id": "paget",
        "patch_pitch_mm": 0.1,
        "tile_period_mm": 0.2,
        "design_fractions": {"R": 0.25, "G": 0.5, "B": 0.25},
        "cells": [
            {"class": "R", "polygon": [[0, 0], [0.5, 0], [0.5, 0.5], [0, 0.5]]},
            {"class": "G", "polygon": [[0.5, 0], [1, 0], [1, 0.5], [0.5, 0.5]]},
            {"class": "G", "polygon": [[0, 0.5], [0.5, 0.5], [0.5, 1], [0, 1]]},
            {"class": "B", "polygon": [[0.5, 0.5], [1, 0.5], [1, 1], [0.5, 1]]},
        ],
    }


def test_pattern_from_dict_round_trip(paget):
    pat = pattern_from_dict(_paget_dict())
    assert np.array_equal(pat.class_table(), paget.class_table())


def test_pattern_rejects_gap():
    d = _paget_dict()
    del d["cells"][3]
    with pytest.raises(BadPattern):
        pattern_from_dict(d)


def test_pattern_rejects_overlap():
    d = _paget_dict()
    d["cells"][0]["polygon"] = [[0, 0], [0.6, 0], [0.6, 0.5], [0, 0.5]]
    with pytest.raises(BadPattern):
        pattern_from_dict(d)


def test_pattern_rejects_missing_class():
    d = _paget_dict()
    d["cells"][3]["class"] = "G"
    with pytest.raises(BadPattern):
        pattern_from_dict(d)


def test_pattern_rejects_non_integer_tile():
    with pytest.raises(BadPattern):
        ScreenPattern(
            process_id="paget",
            cells=(("R", ((0, 0), (1, 0), (1, 1))), ("G", ((0, 0), (1, 1), (0, 1)))),
            patch_pitch_mm=0.13,
            tile_period_mm=0.2,
        )


def test_load_pattern_file(tmp_path, paget):
    import json

    path = tmp_path / "pat.json"
    path.write_text(json.dumps(_paget_dict()))
    pat = load_pattern(path)
    assert pat.tile_period_mm == paget.tile_period_mm


def test_marks_preset_only_where_expected():
    assert pattern_preset("finlay").marks is not None
    assert pattern_preset("paget").marks is None
