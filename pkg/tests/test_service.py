import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from conftest import gauge_patch_error
from rescreen.geometry import map_from_dict, scan_to_screen, screen_to_scan
from rescreen.project import Project, ProjectState, load_project, project_to_bytes, save_project
from rescreen.raster import load_raster, save_raster
from rescreen.service import ServiceState, app_for_project, build_app


@pytest.fixture(scope="module")
def files(tmp_path_factory, small_plate):
    root = tmp_path_factory.mktemp("svc")
    save_raster(small_plate.scan, root / "scan.tif")
    registered = Project(
        mono_path="scan.tif",
        output_image="out/result.tif",
        map=small_plate.map,
        base_dir=str(root),
    )
    save_project(registered, root / "plate.json")
    save_project(replace(registered, map=None), root / "unregistered.json")
    return {"root": root, "path": root / "plate.json", "plate": small_plate}


@pytest.fixture
def client(files):
    # fresh app per test so PATCH mutations cannot leak between tests
    return TestClient(app_for_project(files["path"]), raise_server_exceptions=False)


@pytest.fixture
def unreg_client(files):
    return TestClient(
        app_for_project(files["root"] / "unregistered.json"), raise_server_exceptions=False
    )


def _map_of(payload):
    return map_from_dict(payload["project"]["registration"]["map"])


def test_state_payload(client, files):
    r = client.get("/state")
    assert r.status_code == 200
    s = r.json()
    assert set(s) == {"version", "path", "registered", "scan", "registration", "project"}
    assert s["version"] == 1
    assert s["path"] == str(files["path"])
    assert s["registered"] is True
    scan = files["plate"].scan
    assert s["scan"] == {"width": scan.width, "height": scan.height, "ppi": scan.ppi}
    assert set(s["registration"]) >= {"rotation_deg", "dx_px", "dy_px", "k1"}
    # repeated reads are pure
    assert client.get("/state").json() == s


def test_patch_render_inversion_sharpen(client):
    r = client.patch(
        "/state",
        json={
            "render": {"exposure": 1.5, "saturation": 0.8},
            "inversion": {"gamma": 1.2},
            "sharpen": {"enabled": True, "radius": 2.0, "amount": 0.4},
        },
    )
    assert r.status_code == 200
    p = r.json()["project"]
    assert p["render"]["exposure"] == 1.5
    assert p["render"]["saturation"] == 0.8
    assert p["inversion"]["gamma"] == 1.2
    assert p["sharpen"] == {"enabled": True, "radius": 2.0, "amount": 0.4}
    # untouched knobs keep their values
    assert p["inversion"]["enabled"] is True


def test_patch_mix_keeps_unnamed_fields(client):
    r = client.patch("/state", json={"mix": {"weights": [0.2, 0.5, 0.3]}})
    assert r.status_code == 200
    m = r.json()["project"]["mix"]
    assert m["weights"] == [0.2, 0.5, 0.3]
    assert m["selected_channel"] is None


@pytest.mark.parametrize(
    "body",
    [
        {"focus": {"x": 1}},
        {"render": {"contrast": 2.0}},
        {"render": {"mode": "bogus"}},
        {"render": {"exposure": "high"}},
        {"inversion": {"speed": 1}},
        {"sharpen": {"radius": "big"}},
        {"mix": {"weights": [0.9, 0.9, 0.9]}},
        {"registration": {"warp": 1.0}},
        {"registration_delta": {"rotation_deg": "a bit"}},
    ],
)
def test_patch_rejects_bad_bodies(client, body):
    r = client.patch("/state", json=body)
    assert r.status_code == 422
    assert set(r.json()) == {"error", "detail"}


def test_patch_rejects_non_object_body(client):
    r = client.patch("/state", json=[1, 2, 3])
    assert r.status_code == 422
    assert "JSON object" in r.json()["detail"]


def test_patch_registration_absolute(client):
    before = client.get("/state").json()["registration"]
    r = client.patch("/state", json={"registration": {"dx_px": 12.5, "dy_px": -3.0}})
    assert r.status_code == 200
    after = r.json()["registration"]
    assert after["dx_px"] == 12.5
    assert after["dy_px"] == -3.0
    assert after["rotation_deg"] == pytest.approx(before["rotation_deg"])


def test_patch_rotation_delta_pivots_about_scan_center(client, files):
    s0 = client.get("/state").json()
    m0 = _map_of(s0)
    r = client.patch("/state", json={"registration_delta": {"rotation_deg": 0.2}})
    assert r.status_code == 200
    s1 = r.json()
    m1 = _map_of(s1)
    assert s1["registration"]["rotation_deg"] == pytest.approx(
        s0["registration"]["rotation_deg"] + 0.2
    )
    w, h = s0["scan"]["width"], s0["scan"]["height"]
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    corner = np.array([20.0, 20.0])
    # the screen point under the scan center stays put; corners swing
    drift_c = screen_to_scan(m1, scan_to_screen(m0, center)) - center
    drift_k = screen_to_scan(m1, scan_to_screen(m0, corner)) - corner
    assert np.hypot(*drift_c) < 1e-8
    assert np.hypot(*drift_k) > 1.0


def test_tile_scan_equals_raw_crop(client, files):
    r = client.get("/tile", params={"x": 32, "y": 48, "w": 256, "h": 256})
    assert r.status_code == 200
    assert r.headers["content-type"] == "image/png"
    img = Image.open(io.BytesIO(r.content))
    assert img.mode == "L"
    assert img.size == (256, 256)
    loaded = load_raster(files["root"] / "scan.tif", source_tag="negative")
    expect = np.rint(np.clip(loaded.samples[48:304, 32:288], 0.0, 1.0) * 255.0).astype(np.uint8)
    assert np.array_equal(np.asarray(img), expect)


def test_tile_final_stage_deterministic(client):
    params = {"x": 300, "y": 300, "w": 192, "h": 192, "zoom": 1.5, "stage": "final"}
    a = client.get("/tile", params=params)
    b = client.get("/tile", params=params)
    assert a.status_code == 200
    img = Image.open(io.BytesIO(a.content))
    assert img.mode == "RGB"
    assert img.size == (288, 288)
    assert a.content == b.content


def test_tile_viewport_validation(client):
    s = client.get("/state").json()["scan"]
    cases = [
        {"x": 0, "y": 0, "w": 64, "h": 64, "stage": "nope"},
        {"x": -4, "y": 0, "w": 64, "h": 64},
        {"x": 0, "y": 0, "w": 0, "h": 64},
        {"x": 0, "y": 0, "w": 64, "h": 64, "zoom": 0},
        {"x": 0, "y": 0, "w": 64, "h": 64, "zoom": 9},
        {"x": 0, "y": 0, "w": 300, "h": 300, "zoom": 8},  # output side over the cap
        {"x": s["width"] - 50, "y": 0, "w": 100, "h": 64},
    ]
    for params in cases:
        r = client.get("/tile", params=params)
        assert r.status_code == 422, params
        assert r.json()["error"] == "ViewportOutOfBounds"


def test_unregistered_gets_conflict(unreg_client):
    r = unreg_client.get("/tile", params={"x": 0, "y": 0, "w": 64, "h": 64, "stage": "demosaic"})
    assert r.status_code == 409
    assert r.json()["error"] == "Unregistered"
    r = unreg_client.patch("/state", json={"registration_delta": {"rotation_deg": 0.1}})
    assert r.status_code == 409
    # the scan itself needs no map
    assert unreg_client.get("/tile", params={"x": 0, "y": 0, "w": 64, "h": 64}).status_code == 200


def test_register_auto_endpoint(unreg_client, files, paget):
    assert unreg_client.get("/state").json()["registered"] is False
    r = unreg_client.post("/register/auto")
    assert r.status_code == 200
    body = r.json()
    assert set(body) == {"registration", "objective", "marks_found", "candidates_scored"}
    assert body["objective"] > 0
    assert body["marks_found"] == 0
    assert body["candidates_scored"] >= 1
    s = unreg_client.get("/state").json()
    assert s["registered"] is True
    plate = files["plate"]
    err = gauge_patch_error(
        _map_of(s), plate.map, paget, (plate.scan.height, plate.scan.width)
    )
    assert err < 0.2


def test_save_writes_canonical_bytes(files, tmp_path):
    project = Project(
        mono_path=str(files["root"] / "scan.tif"),
        output_image="out.tif",
        map=files["plate"].map,
        base_dir=str(tmp_path),
    )
    path = tmp_path / "editable.json"
    save_project(project, path)
    c = TestClient(app_for_project(path), raise_server_exceptions=False)
    assert c.patch("/state", json={"render": {"exposure": 2.0}}).status_code == 200
    r = c.post("/save")
    assert r.status_code == 200
    assert r.json() == {"saved": str(path)}
    want = replace(project, render=replace(project.render, exposure=2.0))
    assert path.read_bytes() == project_to_bytes(want)
    assert load_project(path).render.exposure == 2.0


def test_save_without_path_rejected(files):
    project = load_project(files["path"])
    app = build_app(ServiceState(ProjectState(project)))
    c = TestClient(app, raise_server_exceptions=False)
    r = c.post("/save")
    assert r.status_code == 422
    assert "without a project path" in r.json()["detail"]


def test_concurrent_reads_and_edits(client):
    def tile(_):
        return client.get("/tile", params={"x": 200, "y": 200, "w": 128, "h": 128}).status_code

    def nudge(i):
        return client.patch("/state", json={"render": {"exposure": 1.0 + 0.1 * i}}).status_code

    with ThreadPoolExecutor(max_workers=4) as pool:
        codes = list(pool.map(tile, range(4))) + list(pool.map(nudge, range(1, 5)))
    assert codes == [200] * 8
