"""Color reconstruction for regular additive screen plates from linear scans."""

from .errors import RescreenError
from .geometry import (
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
from .project import (
    Project,
    ProjectState,
    load_project,
    preview_tile,
    run_project,
    save_project,
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
from .registration import coarse_estimate, refine_registration, register_auto
from .render import (
    PatchGrid,
    RenderParams,
    collect_patch_grid,
    demosaic,
    finalize,
    recover_detail,
    simulate_viewing_screen,
)
from .screen import ScreenPattern, load_pattern, min_ppi, pattern_preset
from .spectra import DyeSet, dyes_from_dict, ideal_dyes

__version__ = "0.1.0"

__all__ = [
    "ChannelMix",
    "DyeSet",
    "LinearRaster",
    "PatchGrid",
    "Project",
    "ProjectState",
    "RegistrationMap",
    "RenderParams",
    "RescreenError",
    "ScreenPattern",
    "coarse_estimate",
    "collect_patch_grid",
    "compose_map",
    "decompose_map",
    "demosaic",
    "dyes_from_dict",
    "finalize",
    "fit_map",
    "ideal_dyes",
    "load_pattern",
    "load_project",
    "load_raster",
    "map_from_dict",
    "map_to_dict",
    "min_ppi",
    "mix_to_mono",
    "negative_to_positive",
    "nyquist_gate",
    "pattern_preset",
    "preview_tile",
    "recover_detail",
    "refine_registration",
    "register_auto",
    "run_project",
    "save_project",
    "save_raster",
    "scan_to_screen",
    "screen_to_scan",
    "sharpen",
    "simulate_viewing_screen",
]
