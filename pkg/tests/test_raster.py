import numpy as np
import pytest
import tifffile
from hypothesis import given, settings
from hypothesis import strategies as st

from rescreen.errors import BadFloor, BadGamma, BadWeights, MissingPpi, UnsupportedEncoding
from rescreen.raster import (
    ChannelMix,
    LinearRaster,
    load_raster,
    mix_to_mono,
    negative_to_positive,
    save_raster,
    sharpen,
)


def _raster(arr, ppi=1200.0, tag="positive_transparency"):
    return LinearRaster(samples=np.asarray(arr, dtype=np.float32), ppi=ppi, source_tag=tag)


def test_save_load_round_trip_16bit(tmp_path):
    rng = np.random.default_rng(0)
    r = _raster(rng.random((40, 30), dtype=np.float32))
    path = tmp_path / "t.tif"
    save_raster(r, path)
    back = load_raster(path)
    # 16-bit codes are the exact quantization of the saved samples
    codes = np.rint(r.samples * 65535.0)
    assert np.array_equal(np.rint(back.samples * 65535.0), codes)
    assert back.ppi == pytest.approx(1200.0)
    assert back.channels == 1


def test_save_load_rgb(tmp_path):
    rng = np.random.default_rng(1)
    r = _raster(rng.random((16, 20, 3), dtype=np.float32))
    path = tmp_path / "rgb.tif"
    save_raster(r, path)
    back = load_raster(path)
    assert back.channels == 3
    assert back.samples.shape == (16, 20, 3)


def test_save_deterministic(tmp_path):
    rng = np.random.default_rng(2)
    r = _raster(rng.random((25, 25), dtype=np.float32))
    save_raster(r, tmp_path / "a.tif")
    save_raster(r, tmp_path / "b.tif")
    assert (tmp_path / "a.tif").read_bytes() == (tmp_path / "b.tif").read_bytes()


def test_load_gamma_decode(tmp_path):
    arr = (np.linspace(0, 1, 256).reshape(16, 16) * 65535).astype(np.uint16)
    path = tmp_path / "g.tif"
    tifffile.imwrite(path, arr, resolution=(1000, 1000), resolutionunit="INCH")
    lin = load_raster(path)
    dec = load_raster(path, gamma=2.2)
    assert np.allclose(dec.samples, lin.samples**2.2, atol=1e-6)


def test_load_requires_ppi(tmp_path):
    path = tmp_path / "noppi.tif"
    tifffile.imwrite(path, np.zeros((8, 8), dtype=np.uint16))
    with pytest.raises(MissingPpi):
        load_raster(path)
    assert load_raster(path, ppi=600.0).ppi == 600.0


def test_load_cm_resolution_tag(tmp_path):
    path = tmp_path / "cm.tif"
    tifffile.imwrite(
        path, np.zeros((8, 8), dtype=np.uint16), resolution=(472, 472), resolutionunit="CENTIMETER"
    )
    # 472 px/cm is 1198.88 ppi
    assert load_raster(path).ppi == pytest.approx(472 * 2.54)


def test_load_rejects_lossy(tmp_path):
    from PIL import Image

    path = tmp_path / "j.tif"
    arr = (np.random.default_rng(3).random((64, 64)) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="TIFF", compression="jpeg", dpi=(600, 600))
    with pytest.raises(UnsupportedEncoding):
        load_raster(path)


def test_channel_mix_validation():
    with pytest.raises(BadWeights):
        ChannelMix(weights=(0.5, 0.5, 0.5))
    with pytest.raises(BadWeights):
        ChannelMix(weights=(-0.2, 0.6, 0.6))
    assert ChannelMix().weights == pytest.approx((1 / 3, 1 / 3, 1 / 3))


def test_mix_weighted_sum():
    arr = np.zeros((4, 4, 3), dtype=np.float32)
    arr[..., 0] = 0.2
    arr[..., 1] = 0.6
    arr[..., 2] = 1.0
    mono = mix_to_mono(_raster(arr), ChannelMix(weights=(0.5, 0.25, 0.25)))
    assert mono.channels == 1
    assert mono.samples == pytest.approx(np.full((4, 4), 0.5), abs=1e-6)


def test_mix_channel_pull():
    arr = np.zeros((4, 4, 3), dtype=np.float32)
    arr[..., 2] = 0.7
    mono = mix_to_mono(_raster(arr), ChannelMix(selected_channel=2))
    assert mono.samples == pytest.approx(np.full((4, 4), 0.7))
    with pytest.raises(BadWeights):
        mix_to_mono(_raster(arr), ChannelMix(selected_channel=5))


def test_mix_mono_passthrough():
    r = _raster(np.full((4, 4), 0.3))
    assert mix_to_mono(r, ChannelMix()) is r


def test_inversion_endpoints():
    neg = _raster(np.array([[0.01, 1.0, 0.005]]), tag="negative")
    pos = negative_to_positive(neg, gamma=1.0, t_floor=0.01)
    # densest useful negative reads full white; clear film reads t_floor
    assert pos.samples[0, 0] == pytest.approx(1.0)
    assert pos.samples[0, 1] == pytest.approx(0.01)
    # below the floor clamps to white rather than exploding
    assert pos.samples[0, 2] == pytest.approx(1.0)
    assert pos.source_tag == "positive_transparency"


@settings(max_examples=30, deadline=None)
@given(
    st.floats(0.2, 3.0),
    st.floats(0.001, 0.5),
)
def test_inversion_antitone(gamma, t_floor):
    t = np.linspace(0.0, 1.0, 64, dtype=np.float32).reshape(8, 8)
    pos = negative_to_positive(_raster(t, tag="negative"), gamma=gamma, t_floor=t_floor)
    flat = pos.samples.ravel()
    assert np.all(np.diff(flat) <= 1e-6)
    assert np.all((flat >= 0) & (flat <= 1))


def test_inversion_guards():
    neg = _raster(np.full((2, 2), 0.5), tag="negative")
    with pytest.raises(BadGamma):
        negative_to_positive(neg, gamma=0.0)
    with pytest.raises(BadFloor):
        negative_to_positive(neg, t_floor=1.5)
    with pytest.raises(ValueError):
        negative_to_positive(_raster(np.full((2, 2), 0.5)))


def test_sharpen_identity_and_overshoot():
    rng = np.random.default_rng(4)
    r = _raster(rng.random((32, 32), dtype=np.float32))
    assert sharpen(r, 2.0, 0.0) is r
    assert sharpen(r, 0.1, 1.0) is r
    out = sharpen(r, 1.5, 0.8)
    assert out.samples.shape == r.samples.shape
    assert np.all((out.samples >= 0) & (out.samples <= 1))
    # an edge gains local contrast
    step = np.zeros((16, 32), dtype=np.float32)
    step[:, 16:] = 0.8
    step += 0.1
    sh = sharpen(_raster(step), 1.0, 1.0)
    assert sh.samples[8, 14] < step[8, 14]
    assert sh.samples[8, 17] > step[8, 17]
