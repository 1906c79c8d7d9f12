"""Command line front end: analyze, register, render, serve.

Exit codes: 0 success; 1 diagnostics over threshold; 3 unregistered
project; 4 unreadable or invalid inputs; 10 and up name the failing
pipeline stage (see STAGE_EXIT).  argparse itself exits 2 on bad usage.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .errors import RescreenError, StageError, Unregistered
from .geometry import decompose_map, nyquist_gate
from .project import load_project, run_project, save_project, ProjectState
from .raster import ChannelMix, load_raster, mix_to_mono
from .registration import coarse_estimate, map_from_coarse, register_auto
from .screen import pattern_preset

STAGE_EXIT = {
    "load": 10,
    "mix": 11,
    "sharpen": 12,
    "invert": 13,
    "nyquist_gate": 14,
    "collect": 15,
    "demosaic": 16,
    "recover_detail": 17,
    "screen_sim": 18,
    "matrix": 19,
    "write": 20,
}


def _kv(key, value) -> None:
    # booleans lowercased to match the report writer's delimited convention
    if isinstance(value, bool):
        value = "true" if value else "false"
    print(f"{key}\t{value}")


def cmd_analyze(args) -> int:
    raster = load_raster(args.scan, ppi=args.ppi)
    mono = mix_to_mono(raster, ChannelMix()) if raster.channels == 3 else raster
    pattern = pattern_preset(args.process)
    est = coarse_estimate(mono, pattern, mono.ppi)
    m = map_from_coarse(est, (mono.height, mono.width))
    verdict = nyquist_gate(m, pattern, mono)
    _kv("process", pattern.process_id)
    _kv("period_px", repr(est.period_px))
    _kv("rotation_deg", repr(est.rotation_deg))
    _kv("confidence", repr(est.confidence))
    _kv("peak_to_background", repr(est.diagnostics["peak_to_background"]))
    _kv("px_per_patch", repr(verdict.px_per_patch))
    _kv("nyquist_ok", verdict.ok)
    for p in est.diagnostics["peak_table"]:
        _kv(
            f"peak({p['harmonic'][0]},{p['harmonic'][1]})",
            f"{p['freq'][0]!r}\t{p['freq'][1]!r}\t{p['magnitude']!r}",
        )
    if args.out is not None:
        from .report import write_analyze_report

        for path in write_analyze_report(args.out, est, verdict):
            _kv("wrote", path)
    return 0 if verdict.ok else 1


def cmd_register(args) -> int:
    project = load_project(args.project)
    state = ProjectState(project, args.project)
    mono = state.working_mono()
    nominal = project.ppi_override if project.ppi_override is not None else mono.ppi
    m, info = register_auto(mono, project.pattern(), nominal, return_info=True)
    save_project(replace(project, map=m), args.project)
    _kv("objective", repr(info["objective"]))
    _kv("marks_found", info["marks_found"])
    _kv("candidates_scored", info["candidates_scored"])
    for key, value in decompose_map(m).items():
        _kv(key, repr(value))
    _kv("wrote", args.project)
    return 0


def cmd_render(args) -> int:
    project = load_project(args.project)
    result = run_project(project)
    report = result["report"]
    for stage in report["stages"]:
        _kv("stage", stage)
    _kv("nyquist.px_per_patch", repr(report["nyquist"]["px_per_patch"]))
    if "grid" in report:
        _kv("grid.missing_fraction", repr(report["grid"]["missing_fraction"]))
    _kv("output.saturated_fraction", repr(report["output"]["saturated_fraction"]))
    for path in result["outputs"]:
        _kv("wrote", path)
    flags = report["flags"]
    for name, ok in sorted(flags.items()):
        _kv(f"flag.{name}", ok)
    return 0 if all(flags.values()) else 1


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app_for_project

    app = app_for_project(args.project)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rescreen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="identify the screen lattice in a scan")
    p.add_argument("scan", help="TIFF scan to analyze")
    p.add_argument("--process", default="paget", help="pattern preset id (default paget)")
    p.add_argument("--ppi", type=float, default=None, help="override the scan's resolution tag")
    p.add_argument("--out", default=None, help="directory for the delimited report and figures")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("register", help="estimate the registration map and store it")
    p.add_argument("project", help="project JSON file")
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("render", help="run the full reconstruction queue")
    p.add_argument("project", help="project JSON file")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("serve", help="start the loopback preview service")
    p.add_argument("project", help="project JSON file")
    p.add_argument("--port", type=int, default=8210)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Unregistered as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return STAGE_EXIT.get(e.stage, 4)
    except RescreenError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
