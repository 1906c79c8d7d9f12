"""Project files, the batch reconstruction queue, and viewport previews.

A project is a UTF-8 JSON document (schema version 1) holding every input
path and parameter of one plate's reconstruction, so a run is reproducible
from the file alone.  Serialization is canonical: keys sorted, two-space
indent, trailing newline, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .colorimetry import (
    SRGB_D65,
    cie_1931_observer,
    dye_to_xyz_matrix,
    illuminant,
    process_to_display_matrix,
    xyz_to_display,
)
from .errors import BelowNyquist, ProjectError, StageError, Unregistered, ViewportOutOfBounds
from .geometry import (
    RegistrationMap,
    decompose_map,
    map_from_dict,
    map_to_dict,
    nyquist_gate,
    scan_to_screen,
)
from .raster import (
    ChannelMix,
    LinearRaster,
    load_raster,
    mix_to_mono,
    negative_to_positive,
    save_raster,
    sharpen,
)
from .render import (
    RenderParams,
    collect_patch_grid,
    demosaic,
    finalize,
    recover_detail,
    simulate_viewing_screen,
)
from .screen import ScreenPattern, load_pattern, pattern_preset
from .spectra import ideal_dyes, dyes_from_dict

PROJECT_VERSION = 1

# thresholds turning diagnostics into the CLI pass/fail verdict
MISSING_PATCH_THRESHOLD = 0.2
CLAMP_THRESHOLD = 0.25

PREVIEW_STAGES = ("scan", "screen_sim", "demosaic", "final")
MAX_TILE_SIDE = 1024


@dataclass(frozen=True)
class Project:
    """Every parameter of one reconstruction, as persisted to disk.

    Paths are stored as written (possibly relative); resolve() maps them
    against base_dir, which is the project file's directory after a load.
    """

    mono_path: str | None
    output_image: str
    rgb_path: str | None = None
    infrared_path: str | None = None
    ppi_override: float | None = None
    decode_gamma: float | None = None
    process_id: str = "paget"
    pattern_file: str | None = None
    map: RegistrationMap | None = None
    mix: ChannelMix = field(default_factory=ChannelMix)
    invert_enabled: bool = True
    invert_gamma: float = 1.0
    invert_floor: float = 0.01
    sharpen_enabled: bool = False
    sharpen_radius: float = 2.0
    sharpen_amount: float = 0.5
    render: RenderParams = field(default_factory=RenderParams)
    dyes: str = "ideal"
    illuminant_name: str = "D50"
    report_dir: str | None = None
    base_dir: str = "."

    def __post_init__(self):
        if self.mono_path is None and self.rgb_path is None:
            raise ProjectError("project needs a mono or an RGB scan path")
        if self.illuminant_name not in ("D50", "D65", "equal_energy"):
            raise ProjectError(f"unknown illuminant {self.illuminant_name!r}")

    def resolve(self, p: str) -> Path:
        return (Path(self.base_dir) / p).expanduser()

    @property
    def registered(self) -> bool:
        return self.map is not None

    def pattern(self) -> ScreenPattern:
        if self.pattern_file is not None:
            return load_pattern(self.resolve(self.pattern_file))
        return pattern_preset(self.process_id)

    def dye_set(self):
        if self.dyes == "ideal":
            return ideal_dyes()
        path = self.resolve(self.dyes)
        with open(path, encoding="utf-8") as f:
            return dyes_from_dict(json.load(f), provenance=str(path))

    def to_dict(self) -> dict:
        if self.map is None:
            registration = {"state": "unregistered"}
        else:
            registration = {"state": "registered", "map": map_to_dict(self.map)}
        return {
            "version": PROJECT_VERSION,
            "inputs": {
                "mono": self.mono_path,
                "rgb": self.rgb_path,
                "infrared": self.infrared_path,
                "ppi": self.ppi_override,
                "gamma": self.decode_gamma,
            },
            "process": {"id": self.process_id, "pattern_file": self.pattern_file},
            "registration": registration,
            "mix": {
                "weights": list(self.mix.weights),
                "selected_channel": self.mix.selected_channel,
            },
            "inversion": {
                "enabled": self.invert_enabled,
                "gamma": self.invert_gamma,
                "t_floor": self.invert_floor,
            },
            "sharpen": {
                "enabled": self.sharpen_enabled,
                "radius": self.sharpen_radius,
                "amount": self.sharpen_amount,
            },
            "render": {
                "exposure": self.render.exposure,
                "white_balance": list(self.render.white_balance),
                "saturation": self.render.saturation,
                "output_space": self.render.output_space,
                "mode": self.render.mode,
            },
            "color": {"dyes": self.dyes, "illuminant": self.illuminant_name},
            "outputs": {"image": self.output_image, "report_dir": self.report_dir},
        }


def project_from_dict(doc: dict, base_dir: str = ".") -> Project:
    if not isinstance(doc, dict) or doc.get("version") != PROJECT_VERSION:
        raise ProjectError(
            f"unsupported project version {doc.get('version')!r}; this build reads version {PROJECT_VERSION}"
        )
    inputs = doc.get("inputs", {})
    reg = doc.get("registration", {})
    state = reg.get("state")
    if state == "registered":
        m = map_from_dict(reg["map"])
    elif state == "unregistered":
        m = None
    else:
        raise ProjectError(f"registration.state must be 'registered' or 'unregistered', got {state!r}")
    mix = doc.get("mix", {})
    inv = doc.get("inversion", {})
    shp = doc.get("sharpen", {})
    ren = doc.get("render", {})
    color = doc.get("color", {})
    outputs = doc.get("outputs", {})
    if not outputs.get("image"):
        raise ProjectError("outputs.image path is required")
    try:
        return Project(
            mono_path=inputs.get("mono"),
            rgb_path=inputs.get("rgb"),
            infrared_path=inputs.get("infrared"),
            ppi_override=inputs.get("ppi"),
            decode_gamma=inputs.get("gamma"),
            process_id=doc.get("process", {}).get("id", "paget"),
            pattern_file=doc.get("process", {}).get("pattern_file"),
            map=m,
            mix=ChannelMix(
                weights=tuple(mix.get("weights", (1 / 3, 1 / 3, 1 / 3))),
                selected_channel=mix.get("selected_channel"),
            ),
            invert_enabled=bool(inv.get("enabled", True)),
            invert_gamma=float(inv.get("gamma", 1.0)),
            invert_floor=float(inv.get("t_floor", 0.01)),
            sharpen_enabled=bool(shp.get("enabled", False)),
            sharpen_radius=float(shp.get("radius", 2.0)),
            sharpen_amount=float(shp.get("amount", 0.5)),
            render=RenderParams(
                exposure=float(ren.get("exposure", 1.0)),
                white_balance=tuple(ren.get("white_balance", (1.0, 1.0, 1.0))),
                saturation=float(ren.get("saturation", 1.0)),
                output_space=ren.get("output_space", "display_rgb"),
                mode=ren.get("mode", "demosaic_with_detail"),
            ),
            dyes=color.get("dyes", "ideal"),
            illuminant_name=color.get("illuminant", "D50"),
            output_image=outputs["image"],
            report_dir=outputs.get("report_dir"),
            base_dir=base_dir,
        )
    except (ValueError, TypeError) as e:
        raise ProjectError(f"bad project field: {e}") from e


def project_to_bytes(project: Project) -> bytes:
    """Canonical serialization; the only writer, so saves are comparable."""
    doc = project.to_dict()
    return (json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=2) + "\n").encode("utf-8")


def save_project(project: Project, path) -> None:
    Path(path).write_bytes(project_to_bytes(project))


def load_project(path) -> Project:
    """Parse and validate; every referenced input file must exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ProjectError(f"cannot read project {path}: {e}") from e
    project = project_from_dict(doc, base_dir=str(path.parent))
    for label, p in (
        ("inputs.mono", project.mono_path),
        ("inputs.rgb", project.rgb_path),
        ("inputs.infrared", project.infrared_path),
        ("process.pattern_file", project.pattern_file),
        ("color.dyes", None if project.dyes == "ideal" else project.dyes),
    ):
        if p is not None and not project.resolve(p).is_file():
            raise ProjectError(f"{label} references missing file {project.resolve(p)}")
    return project


def _dye_display_rgb(dyes, illum, observer, fractions, target=SRGB_D65) -> np.ndarray:
    """Per-class linear display RGB of the dyes under the taken illuminant,
    adapted from the plate's own fraction-weighted white."""
    f = np.asarray(fractions, dtype=np.float64)
    f = f / f.sum()
    dye_m = dye_to_xyz_matrix(dyes, illum, observer, f)
    plate_white = dye_m @ f
    return xyz_to_display(dye_m.T, target, source_white_xyz=plate_white)


class ProjectState:
    """A loaded project plus cached intermediate rasters.

    The service mutates it under a lock; rasters are reloaded lazily after
    the relevant parameters change.
    """

    def __init__(self, project: Project, path=None):
        self.project = project
        self.path = Path(path) if path is not None else None
        self._source = None
        self._mono = None
        self._positive = None

    def update(self, **changes) -> None:
        before = self.project
        self.project = replace(before, **changes)
        if any(k in changes for k in ("mono_path", "rgb_path", "ppi_override", "decode_gamma")):
            self._source = self._mono = self._positive = None
        if "mix" in changes:
            self._mono = self._positive = None
        if any(k.startswith("invert") for k in changes) or any(
            k.startswith("sharpen") for k in changes
        ):
            self._positive = None

    def source(self) -> LinearRaster:
        if self._source is None:
            p = self.project
            tag = "negative" if p.invert_enabled else "positive_transparency"
            path = p.resolve(p.rgb_path if p.mono_path is None else p.mono_path)
            self._source = load_raster(
                path, gamma=p.decode_gamma, ppi=p.ppi_override, source_tag=tag
            )
        return self._source

    def working_mono(self) -> LinearRaster:
        if self._mono is None:
            src = self.source()
            self._mono = mix_to_mono(src, self.project.mix) if src.channels == 3 else src
        return self._mono

    def positive(self) -> LinearRaster:
        if self._positive is None:
            p = self.project
            r = self.working_mono()
            if p.sharpen_enabled:
                r = sharpen(r, p.sharpen_radius, p.sharpen_amount)
            if p.invert_enabled:
                r = negative_to_positive(r, gamma=p.invert_gamma, t_floor=p.invert_floor)
            self._positive = r
        return self._positive


def _stage(name: str, fn):
    try:
        return fn()
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def run_project(project: Project) -> dict:
    """Execute the full queue and write the output image plus report files.

    Returns {"outputs": [paths], "report": {...}}.  Nothing is written for
    an unregistered project, and a failure in any stage surfaces as a
    StageError naming the stage.  Reruns are byte-identical.
    """
    if project.map is None:
        raise Unregistered("project has no registration map; run register first")
    state = ProjectState(project)
    pattern = project.pattern()
    stages = []
    report: dict = {"process": pattern.process_id}

    src = _stage("load", state.source)
    stages.append("load")
    report["input"] = {
        "path": str(project.resolve(project.rgb_path if project.mono_path is None else project.mono_path)),
        "width": src.width,
        "height": src.height,
        "ppi": src.ppi,
        "channels": src.channels,
        "clip_ratio": float(src.meta.get("clip_ratio", 0.0)),
    }
    work = src
    if src.channels == 3:
        work = _stage("mix", lambda: mix_to_mono(src, project.mix))
        stages.append("mix")
    if project.sharpen_enabled:
        sharpened = work
        work = _stage(
            "sharpen", lambda: sharpen(sharpened, project.sharpen_radius, project.sharpen_amount)
        )
        stages.append("sharpen")
    if project.invert_enabled:
        negative = work
        work = _stage(
            "invert",
            lambda: negative_to_positive(
                negative, gamma=project.invert_gamma, t_floor=project.invert_floor
            ),
        )
        stages.append("invert")
    positive = work

    def gate():
        v = nyquist_gate(project.map, pattern, positive)
        if not v.ok:
            raise BelowNyquist(f"scan resolves {v.px_per_patch:.2f} px per patch; need 2")
        return v

    verdict = _stage("nyquist_gate", gate)
    stages.append("nyquist_gate")
    report["nyquist"] = {"ok": verdict.ok, "px_per_patch": verdict.px_per_patch}

    dyes = project.dye_set()
    illum = illuminant(project.illuminant_name)
    observer = cie_1931_observer()
    fractions = pattern.class_fractions()
    grid = None

    if project.render.mode == "screen_simulation":
        out_rgb = _stage(
            "screen_sim",
            lambda: simulate_viewing_screen(
                positive, project.map, pattern, _dye_display_rgb(dyes, illum, observer, fractions)
            ),
        )
        stages.append("screen_sim")
        final = _stage("matrix", lambda: finalize(out_rgb, project.render, np.eye(3)))
        stages.append("matrix")
    else:
        grid = _stage("collect", lambda: collect_patch_grid(positive, project.map, pattern))
        stages.append("collect")
        report["grid"] = {
            "tiles_w": grid.tiles_w,
            "tiles_h": grid.tiles_h,
            "missing_fraction": grid.missing_fraction(pattern),
        }
        out_rgb = _stage("demosaic", lambda: demosaic(grid, pattern))
        stages.append("demosaic")
        if project.render.mode == "demosaic_with_detail":
            out_rgb = _stage(
                "recover_detail", lambda: recover_detail(out_rgb, positive, project.map)
            )
            stages.append("recover_detail")
        M = _stage(
            "matrix",
            lambda: process_to_display_matrix(dyes, illum, observer, fractions)
            if project.render.output_space == "display_rgb"
            else dye_to_xyz_matrix(dyes, illum, observer, fractions) @ np.diag(fractions),
        )
        final = _stage("matrix", lambda: finalize(out_rgb, project.render, M))
        stages.append("matrix")

    saturated = float(np.mean((final.samples <= 0.0) | (final.samples >= 1.0)))
    report["output"] = {
        "width": final.width,
        "height": final.height,
        "ppi": final.ppi,
        "saturated_fraction": saturated,
    }
    report["registration"] = decompose_map(project.map)
    missing = report.get("grid", {}).get("missing_fraction", 0.0)
    report["flags"] = {
        "missing_ok": missing < MISSING_PATCH_THRESHOLD,
        "clamp_ok": saturated < CLAMP_THRESHOLD,
    }

    out_path = project.resolve(project.output_image)
    written = [str(out_path)]
    stages.append("write")
    report["stages"] = stages

    def write_all():
        out_path.parent.mkdir(parents=True, exist_ok=True)
        save_raster(final, out_path)
        if project.report_dir is not None:
            from .report import write_run_report

            written.extend(write_run_report(project.resolve(project.report_dir), report, grid, final, pattern))

    _stage("write", write_all)
    report["outputs"] = written
    return {"outputs": written, "report": report}


def _viewport_raster(src: LinearRaster, x: float, y: float, w: float, h: float, zoom: float) -> LinearRaster:
    out_w = max(1, int(round(w * zoom)))
    out_h = max(1, int(round(h * zoom)))
    if out_w > MAX_TILE_SIDE or out_h > MAX_TILE_SIDE:
        raise ViewportOutOfBounds(f"tile {out_w}x{out_h} exceeds {MAX_TILE_SIDE} on a side")
    if x == int(x) and y == int(y) and zoom == 1.0:
        samples = src.samples[int(y) : int(y) + out_h, int(x) : int(x) + out_w].copy()
    else:
        from scipy.ndimage import map_coordinates

        xs = x + (np.arange(out_w) + 0.5) / zoom - 0.5
        ys = y + (np.arange(out_h) + 0.5) / zoom - 0.5
        gx, gy = np.meshgrid(xs, ys)
        if src.channels == 1:
            samples = map_coordinates(src.samples, [gy, gx], order=1, mode="nearest")
        else:
            samples = np.stack(
                [
                    map_coordinates(src.samples[..., c], [gy, gx], order=1, mode="nearest")
                    for c in range(3)
                ],
                axis=-1,
            )
    return LinearRaster(
        samples=samples.astype(np.float32),
        ppi=src.ppi * zoom,
        source_tag=src.source_tag,
        meta=dict(src.meta),
    )


def _viewport_map(m: RegistrationMap, x: float, y: float, zoom: float) -> RegistrationMap:
    # scaling and shifting commute exactly with the radial model when the
    # center and normalization radius are carried along
    S = np.array([[zoom, 0.0, -x * zoom], [0.0, zoom, -y * zoom], [0.0, 0.0, 1.0]])
    px, py = m.principal_point
    return RegistrationMap(
        homography=S @ m.homography,
        k1=m.k1,
        k2=m.k2,
        principal_point=((px - x) * zoom, (py - y) * zoom),
        norm_radius_px=m.norm_radius_px * zoom,
    )


def _to_u8(samples: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(samples, 0.0, 1.0) * 255.0).astype(np.uint8)


def _srgb_u8(linear_rgb: np.ndarray) -> np.ndarray:
    a = np.clip(linear_rgb, 0.0, 1.0)
    enc = np.where(a <= 0.0031308, 12.92 * a, 1.055 * np.power(np.maximum(a, 1e-12), 1 / 2.4) - 0.055)
    return np.rint(np.clip(enc, 0.0, 1.0) * 255.0).astype(np.uint8)


def preview_tile(state: ProjectState, viewport, stage: str) -> np.ndarray:
    """Render one viewport rectangle at one pipeline stage as 8-bit pixels.

    viewport is (x, y, w, h, zoom) in scan pixels; the output covers the
    same scene at round(w * zoom) x round(h * zoom) pixels.  Every stage
    past "scan" needs a registration map and runs the batch functions on
    the windowed raster with a compensated map, so what the preview shows
    is exactly what a full run would produce there.
    """
    if stage not in PREVIEW_STAGES:
        raise ProjectError(f"stage must be one of {PREVIEW_STAGES}, got {stage!r}")
    x, y, w, h, zoom = (float(v) for v in viewport)
    if w <= 0 or h <= 0 or not 0 < zoom <= 8:
        raise ViewportOutOfBounds(f"bad viewport {viewport}")
    scan = state.working_mono()
    if x < 0 or y < 0 or x + w > scan.width or y + h > scan.height:
        raise ViewportOutOfBounds(
            f"viewport {viewport} leaves the {scan.width}x{scan.height} scan"
        )

    if stage == "scan":
        return _to_u8(_viewport_raster(scan, x, y, w, h, zoom).samples)

    project = state.project
    if project.map is None:
        raise Unregistered("preview stages beyond the scan need a registration map")
    tile = _viewport_raster(state.positive(), x, y, w, h, zoom)
    m = _viewport_map(project.map, x, y, zoom)
    pattern = project.pattern()
    dyes = project.dye_set()
    illum = illuminant(project.illuminant_name)
    observer = cie_1931_observer()
    fractions = pattern.class_fractions()
    # previews are for eyes: always encode for the display, whatever the
    # project's batch output space is
    params = replace(project.render, output_space="display_rgb")

    if stage == "screen_sim" or (stage == "final" and params.mode == "screen_simulation"):
        sim = simulate_viewing_screen(
            tile, m, pattern, _dye_display_rgb(dyes, illum, observer, fractions)
        )
        if stage == "final":
            return _to_u8(finalize(sim, params, np.eye(3)).samples)
        return _srgb_u8(sim.samples)

    grid = collect_patch_grid(tile, m, pattern)
    rgb = demosaic(grid, pattern)
    M = process_to_display_matrix(dyes, illum, observer, fractions)
    if stage == "final" and params.mode == "demosaic_with_detail":
        rgb = recover_detail(rgb, tile, m)
        return _to_u8(finalize(rgb, params, M).samples)

    # patch-resolution stages paint each lattice site's color over its patch
    n = pattern.patches_per_tile
    ox, oy = rgb.meta["origin_patch"]
    xs = np.arange(tile.width, dtype=np.float64)
    ys = np.arange(tile.height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    q = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    p, valid = scan_to_screen(m, q, return_valid=True)
    cols = np.clip(np.floor(p[:, 0] * n).astype(np.int64) - ox, 0, rgb.width - 1)
    rows = np.clip(np.floor(p[:, 1] * n).astype(np.int64) - oy, 0, rgb.height - 1)
    painted = rgb.samples[rows, cols].reshape(tile.height, tile.width, 3)
    painted[~valid.reshape(tile.height, tile.width)] = 0.0
    sheet = LinearRaster(
        samples=painted.astype(np.float32), ppi=tile.ppi, source_tag=tile.source_tag
    )
    if stage == "demosaic":
        # the mosaic view gets the color matrix but none of the taste knobs
        return _to_u8(finalize(sheet, RenderParams(), M).samples)
    return _to_u8(finalize(sheet, params, M).samples)
