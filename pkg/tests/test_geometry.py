import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rescreen.errors import DegenerateConfiguration, TooFewPoints
from rescreen.geometry import (
    RegistrationMap,
    compose_map,
    decompose_map,
    fit_map,
    map_from_dict,
    map_to_dict,
    nyquist_gate,
    scan_to_screen,
    screen_to_scan,
)
from rescreen.raster import LinearRaster


def _map(rot=1.3, sx=14.0, sy=14.1, skew=0.05, dx=40.0, dy=-12.0, k1=0.0, **kw):
    return compose_map(
        rotation_deg=rot,
        scale_x_px=sx,
        scale_y_px=sy,
        skew_px=skew,
        dx_px=dx,
        dy_px=dy,
        k1=k1,
        **kw,
    )


def test_round_trip_plain():
    m = _map()
    p = np.random.default_rng(0).uniform(-20, 20, size=(500, 2))
    back = scan_to_screen(m, screen_to_scan(m, p))
    assert np.max(np.abs(back - p)) < 1e-9


def test_round_trip_with_distortion():
    m = _map(k1=0.02, principal_point=(300.0, 200.0), norm_radius_px=350.0)
    p = np.random.default_rng(1).uniform(0, 40, size=(400, 2))
    back = scan_to_screen(m, screen_to_scan(m, p))
    assert np.max(np.abs(back - p)) < 1e-4


def test_round_trip_scan_side():
    m = _map(k1=-0.015, principal_point=(256.0, 256.0), norm_radius_px=300.0)
    q = np.random.default_rng(2).uniform(0, 512, size=(400, 2))
    fwd = screen_to_scan(m, scan_to_screen(m, q))
    assert np.max(np.abs(fwd - q)) < 1e-6


def test_single_point_shape():
    m = _map()
    q = screen_to_scan(m, (2.0, 3.0))
    assert q.shape == (2,)
    assert scan_to_screen(m, q).shape == (2,)


def test_degenerate_homography_rejected():
    H = np.eye(3)
    H[0, 0] = 0.0
    H[1, 1] = 0.0
    H[0, 1] = 0.0
    H[1, 0] = 0.0
    with pytest.raises(DegenerateConfiguration):
        RegistrationMap(homography=H)


def test_fit_map_noiseless_exact():
    true = _map(rot=-0.8, sx=12.7, sy=12.75, skew=0.03, dx=55.0, dy=21.0)
    rng = np.random.default_rng(3)
    P = rng.uniform(0, 30, size=(40, 2))
    pairs = [(p, screen_to_scan(true, p)) for p in P]
    fr = fit_map(pairs)
    Q = screen_to_scan(true, P)
    Q2 = screen_to_scan(fr.map, P)
    assert np.max(np.hypot(*(Q - Q2).T)) < 1e-6
    assert fr.residual_rms_px < 1e-6


def test_fit_map_recovers_distortion():
    true = _map(k1=0.01, principal_point=(250.0, 250.0), norm_radius_px=300.0)
    rng = np.random.default_rng(4)
    P = rng.uniform(0, 36, size=(60, 2))
    pairs = [(p, screen_to_scan(true, p)) for p in P]
    fr = fit_map(pairs, fit_distortion=True, principal_point=(250.0, 250.0), norm_radius_px=300.0)
    assert fr.map.k1 == pytest.approx(0.01, abs=2e-3)
    assert fr.residual_rms_px < 1e-3


def test_fit_map_needs_points():
    true = _map()
    P = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    pairs = [(p, screen_to_scan(true, p)) for p in P]
    with pytest.raises(TooFewPoints):
        fit_map(pairs)


def test_fit_map_rejects_collinear():
    true = _map()
    P = np.array([[i * 1.0, 2.0] for i in range(6)])
    pairs = [(p, screen_to_scan(true, p)) for p in P]
    with pytest.raises(DegenerateConfiguration):
        fit_map(pairs)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(-30, 30),
    st.floats(5, 40),
    st.floats(5, 40),
    st.floats(-0.5, 0.5),
    st.floats(-500, 500),
    st.floats(-500, 500),
)
def test_compose_decompose_round_trip(rot, sx, sy, skew, dx, dy):
    m = compose_map(
        rotation_deg=rot, scale_x_px=sx, scale_y_px=sy, skew_px=skew, dx_px=dx, dy_px=dy
    )
    d = decompose_map(m)
    assert d["rotation_deg"] == pytest.approx(rot, abs=1e-9)
    assert d["scale_x_px"] == pytest.approx(sx, rel=1e-12)
    assert d["scale_y_px"] == pytest.approx(sy, rel=1e-12)
    assert d["skew_px"] == pytest.approx(skew, abs=1e-9)
    assert d["dx_px"] == pytest.approx(dx, abs=1e-9)
    assert d["dy_px"] == pytest.approx(dy, abs=1e-9)


def test_serialization_round_trip():
    m = _map(k1=0.004, principal_point=(123.0, 456.0), norm_radius_px=321.0)
    d = map_to_dict(m)
    m2 = map_from_dict(d)
    assert np.array_equal(m.homography, m2.homography)
    assert m2.k1 == m.k1
    assert m2.principal_point == m.principal_point
    assert m2.norm_radius_px == m.norm_radius_px
    # dict is JSON-ready
    import json

    assert map_to_dict(map_from_dict(json.loads(json.dumps(d)))) == d


def test_nyquist_gate_threshold():
    # 2 patches per tile: tile scale in px sets px per patch
    raster = LinearRaster(samples=np.zeros((200, 200), dtype=np.float32), ppi=1000.0)

    class _P:
        patches_per_tile = 2

    ok = nyquist_gate(_map(sx=5.0, sy=5.0, skew=0.0), _P, raster)
    assert ok.px_per_patch == pytest.approx(2.5, abs=0.05)
    assert ok.ok
    bad = nyquist_gate(_map(sx=3.0, sy=3.0, skew=0.0), _P, raster)
    assert not bad.ok
