"""Linear scan data: loading, channel mixing, inversion, placeholder sharpening.

The universal image currency is the LinearRaster: float32 samples holding
linear transmittance in [0, 1], row-major, 1 or 3 channels, with the
physical scan resolution attached.  No tone curve is ever applied; density
(-log10 T) appears only in diagnostics.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import tifffile
from scipy.ndimage import gaussian_filter

from .errors import (
    BadFloor,
    BadGamma,
    BadWeights,
    ClampWarning,
    CorruptFile,
    MissingPpi,
    UnsupportedEncoding,
)

SOURCE_TAGS = ("negative", "positive_transparency", "infrared")

# Fraction of clamped samples above which we warn about dynamic-range damage.
CLAMP_WARN_RATIO = 0.001


@dataclass(frozen=True)
class LinearRaster:
    """Linear-transmittance image with physical resolution metadata.

    samples: float32, shape (h, w) or (h, w, 3), values in [0, 1].
    Treated as immutable everywhere; operations return new rasters.
    """

    samples: np.ndarray
    ppi: float
    source_tag: str = "positive_transparency"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim not in (2, 3) or (s.ndim == 3 and s.shape[2] != 3):
            raise ValueError(f"samples must be (h, w) or (h, w, 3), got {s.shape}")
        if s.shape[0] < 1 or s.shape[1] < 1:
            raise ValueError("raster must be at least 1x1")
        if not np.all(np.isfinite(s)):
            raise ValueError("raster contains non-finite samples")
        if not self.ppi > 0:
            raise ValueError(f"ppi must be positive, got {self.ppi}")
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"unknown source_tag {self.source_tag!r}")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "ppi", float(self.ppi))

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 2 else self.samples.shape[2]


@dataclass(frozen=True)
class ChannelMix:
    """RGB -> mono reduction: weights summing to 1, or a single channel pull."""

    weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    selected_channel: int | None = None

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != 3 or any(x < 0 for x in w):
            raise BadWeights(f"weights must be 3 non-negative reals, got {self.weights}")
        if abs(sum(w) - 1.0) > 1e-6:
            raise BadWeights(f"weights must sum to 1 within 1e-6, got sum {sum(w)!r}")
        object.__setattr__(self, "weights", w)


# TIFF compression codes we treat as lossless. 5 (LZW) is lossless but needs
# the optional imagecodecs package; handled with a Pillow fallback below.
_LOSSY_COMPRESSIONS = {6, 7, 34892}  # old-style JPEG, JPEG, lossy JPEG-XR


def _ppi_from_tags(page) -> float | None:
    tags = page.tags
    if "XResolution" not in tags:
        return None
    num, den = tags["XResolution"].value
    if den == 0 or num == 0:
        return None
    value = num / den
    unit = tags["ResolutionUnit"].value if "ResolutionUnit" in tags else 2
    unit = int(unit)
    if unit == 3:  # centimeters
        value *= 2.54
    elif unit != 2:
        return None
    return float(value)


def _decode_with_pillow(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
        dpi = im.info.get("dpi")
    ppi = float(dpi[0]) if dpi and dpi[0] else None
    return arr, ppi


def load_raster(
    path,
    *,
    gamma: float | None = None,
    ppi: float | None = None,
    source_tag: str = "positive_transparency",
) -> LinearRaster:
    """Load an 8- or 16-bit grayscale/RGB TIFF as linear transmittance.

    gamma=None decodes as already linear (sample / max); gamma=g decodes as
    (sample / max) ** g.  PPI is read from the resolution tags (inch or cm)
    unless overridden.  Lossy-compressed or unsupported files are rejected;
    out-of-range decoded samples are clamped and counted in meta.
    """
    try:
        with tifffile.TiffFile(path) as tf:
            page = tf.pages[0]
            compression = int(page.compression)
            if compression in _LOSSY_COMPRESSIONS:
                raise UnsupportedEncoding(
                    f"lossy compression (code {compression}) destroys relative densities"
                )
            file_ppi = _ppi_from_tags(page)
            try:
                arr = tf.asarray()
            except (ValueError, KeyError):
                # lossless codec without a decoder in this install (e.g. LZW)
                arr, pil_ppi = _decode_with_pillow(path)
                file_ppi = file_ppi or pil_ppi
    except UnsupportedEncoding:
        raise
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CorruptFile(f"cannot decode {path}: {exc}") from exc

    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise UnsupportedEncoding(f"unsupported sample layout {arr.shape} (need gray or RGB)")
    if arr.dtype == np.uint16:
        max_code = 65535.0
    elif arr.dtype == np.uint8:
        max_code = 255.0
    else:
        raise UnsupportedEncoding(f"unsupported bit depth {arr.dtype} (need uint8 or uint16)")

    effective_ppi = ppi if ppi is not None else file_ppi
    if effective_ppi is None or effective_ppi <= 0:
        raise MissingPpi(f"{path} carries no resolution metadata and no override was given")

    data = arr.astype(np.float32) / np.float32(max_code)
    if gamma is not None:
        if gamma <= 0:
            raise BadGamma(f"decode gamma must be positive, got {gamma}")
        data = np.power(data, np.float32(gamma))

    clipped = int(np.count_nonzero((data < 0.0) | (data > 1.0)))
    data = np.clip(data, 0.0, 1.0)
    clip_ratio = clipped / data.size
    if clip_ratio > CLAMP_WARN_RATIO:
        warnings.warn(
            f"{clip_ratio:.2%} of samples clamped; highlight/shadow color may be lost",
            ClampWarning,
        )
    meta = {"path": str(path), "clip_ratio": clip_ratio, "decode_gamma": gamma}
    return LinearRaster(samples=data, ppi=float(effective_ppi), source_tag=source_tag, meta=meta)


def save_raster(raster: LinearRaster, path, *, bit_depth: int = 16) -> None:
    """Write a raster as an uncompressed TIFF with inch resolution tags.

    16-bit output round-trips load_raster samples exactly.  The writer is
    deterministic: identical rasters produce byte-identical files.
    """
    if bit_depth == 16:
        codes = np.rint(np.clip(raster.samples, 0.0, 1.0) * 65535.0).astype(np.uint16)
    elif bit_depth == 8:
        codes = np.rint(np.clip(raster.samples, 0.0, 1.0) * 255.0).astype(np.uint8)
    else:
        raise UnsupportedEncoding(f"can only write 8- or 16-bit TIFF, not {bit_depth}")
    photometric = "rgb" if raster.channels == 3 else "minisblack"
    res = raster.ppi
    tifffile.imwrite(
        path,
        codes,
        photometric=photometric,
        resolution=(res, res),
        resolutionunit="INCH",
        software=None,
    )


def mix_to_mono(raster: LinearRaster, mix: ChannelMix) -> LinearRaster:
    """Reduce an RGB raster to one channel by weighted sum or channel pull.

    1-channel input passes through unchanged.
    """
    if raster.channels == 1:
        return raster
    if mix.selected_channel is not None:
        idx = int(mix.selected_channel)
        if not 0 <= idx < raster.channels:
            raise BadWeights(f"selected_channel {idx} out of range for {raster.channels} channels")
        mono = raster.samples[:, :, idx].copy()
    else:
        w = np.asarray(mix.weights, dtype=np.float32)
        mono = raster.samples @ w
    mono = np.clip(mono, 0.0, 1.0)
    return LinearRaster(samples=mono, ppi=raster.ppi, source_tag=raster.source_tag, meta=dict(raster.meta))


def negative_to_positive(raster: LinearRaster, gamma: float = 1.0, t_floor: float = 0.01) -> LinearRaster:
    """Simulate the contact-copy negative-to-positive step.

    T_neg -> clamp((t_floor / max(T_neg, t_floor)) ** gamma, 0, 1): the
    darkest useful negative density maps to full white, clear film to
    t_floor**gamma.  The map is antitone above the floor.
    """
    if raster.channels != 1:
        raise ValueError("negative_to_positive expects a 1-channel raster")
    if raster.source_tag != "negative":
        raise ValueError(f"raster is tagged {raster.source_tag!r}, not a negative")
    if not gamma > 0:
        raise BadGamma(f"gamma must be positive, got {gamma}")
    if not 0.0 < t_floor < 1.0:
        raise BadFloor(f"t_floor must lie in (0, 1), got {t_floor}")
    t = np.maximum(raster.samples, np.float32(t_floor))
    positive = np.clip(np.power(np.float32(t_floor) / t, np.float32(gamma)), 0.0, 1.0)
    meta = dict(raster.meta)
    meta["inversion"] = {"gamma": gamma, "t_floor": t_floor}
    return LinearRaster(samples=positive, ppi=raster.ppi, source_tag="positive_transparency", meta=meta)


def sharpen(raster: LinearRaster, radius: float, amount: float) -> LinearRaster:
    """Plain unsharp mask: out = clamp(in + amount * (in - blur(in, radius))).

    radius is the Gaussian sigma in pixels; amount=0 or radius < 0.25 px is
    the identity.  Screen-aware sharpening is a deliberate non-goal; this
    placeholder keeps the pipeline slot occupied.
    """
    if raster.channels != 1:
        raise ValueError("sharpen expects a 1-channel raster")
    if amount < 0:
        raise ValueError(f"amount must be >= 0, got {amount}")
    if amount == 0 or radius < 0.25:
        return raster
    blurred = gaussian_filter(raster.samples, sigma=float(radius), mode="nearest")
    out = np.clip(raster.samples + np.float32(amount) * (raster.samples - blurred), 0.0, 1.0)
    return LinearRaster(samples=out, ppi=raster.ppi, source_tag=raster.source_tag, meta=dict(raster.meta))
