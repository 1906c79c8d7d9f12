"""Delimited diagnostics files and their companion figures.

Everything written here is deterministic: no timestamps, fixed row order,
repr-stable floats, so reruns of the same project are byte-identical.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIG_DPI = 100


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_tsv(path, rows, header=None) -> None:
    lines = []
    if header is not None:
        lines.append("\t".join(header))
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _flatten(prefix: str, value, out: list) -> None:
    if isinstance(value, dict):
        for k in value:
            _flatten(f"{prefix}.{k}" if prefix else str(k), value[k], out)
    elif isinstance(value, (list, tuple)):
        out.append((prefix, " ".join(_fmt(v) for v in value)))
    else:
        out.append((prefix, _fmt(value)))


def _save(fig, path) -> str:
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return str(path)


def coverage_figure(grid, pattern, path) -> str:
    """Map of per-site kernel mass for each site's owning class; holes are
    where demosaic will have to infill."""
    sites = grid.class_sites(pattern)
    own = np.take_along_axis(grid.weights, sites[None], axis=0)[0]
    fig, ax = plt.subplots(figsize=(6, 5), dpi=FIG_DPI)
    im = ax.imshow(own, origin="upper", cmap="viridis")
    fig.colorbar(im, ax=ax, label="kernel mass")
    ax.set_title(f"patch coverage ({grid.tiles_w} x {grid.tiles_h} sites)")
    ax.set_xlabel("site column")
    ax.set_ylabel("site row")
    fig.tight_layout()
    return _save(fig, path)


def preview_figure(final, path, max_side: int = 512) -> str:
    """Decimated look at the written output."""
    arr = final.samples
    step = max(1, int(np.ceil(max(arr.shape[:2]) / max_side)))
    small = arr[::step, ::step]
    fig, ax = plt.subplots(figsize=(6, 6 * small.shape[0] / max(small.shape[1], 1)), dpi=FIG_DPI)
    if small.ndim == 2:
        ax.imshow(np.clip(small, 0, 1), cmap="gray", vmin=0, vmax=1)
    else:
        ax.imshow(np.clip(small, 0, 1))
    ax.set_title(f"output preview (1:{step})")
    ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def write_run_report(report_dir, report: dict, grid, final, pattern) -> list:
    """report.tsv plus figures; returns the list of files written."""
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    rows: list = []
    for key in sorted(k for k in report if k != "stages"):
        _flatten(key, report[key], rows)
    rows.append(("stages", " ".join(report.get("stages", ()))))
    tsv = report_dir / "report.tsv"
    write_tsv(tsv, rows, header=("key", "value"))
    written = [str(tsv)]
    if grid is not None:
        written.append(coverage_figure(grid, pattern, report_dir / "coverage.png"))
    written.append(preview_figure(final, report_dir / "preview.png"))
    return written


def spectrum_figure(est, path) -> str:
    """Lattice carriers in the frequency plane, sized by magnitude, with
    the fitted basis drawn over them."""
    peaks = est.diagnostics["peak_table"]
    fig, ax = plt.subplots(figsize=(6, 6), dpi=FIG_DPI)
    if peaks:
        fx = np.array([p["freq"][0] for p in peaks])
        fy = np.array([p["freq"][1] for p in peaks])
        mag = np.array([p["magnitude"] for p in peaks])
        size = 20 + 180 * mag / mag.max()
        ax.scatter(fx, fy, s=size, c="tab:blue", alpha=0.7, edgecolors="k", linewidths=0.5)
        for p in peaks:
            ax.annotate(str(p["harmonic"]), p["freq"], fontsize=7, xytext=(3, 3),
                        textcoords="offset points")
        lim = 1.5 * max(np.abs(fx).max(), np.abs(fy).max())
    else:
        lim = 0.5
    B = np.array(est.basis, dtype=np.float64)
    if B.size == 4:
        # the reciprocal basis rows are the fundamental carriers
        G = np.linalg.inv(B).T
        for g in G:
            ax.annotate("", xy=g, xytext=(0, 0),
                        arrowprops={"arrowstyle": "->", "color": "tab:red"})
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_aspect("equal")
    ax.axhline(0, color="0.8", lw=0.5)
    ax.axvline(0, color="0.8", lw=0.5)
    ax.set_xlabel("fx (cycles/px)")
    ax.set_ylabel("fy (cycles/px)")
    ax.set_title(
        f"lattice carriers: period {est.period_px:.3f} px, "
        f"rotation {est.rotation_deg:+.3f} deg, confidence {est.confidence:.2f}"
    )
    fig.tight_layout()
    return _save(fig, path)


def write_analyze_report(report_dir, est, verdict=None) -> list:
    """peaks.tsv plus the carrier figure; returns the files written."""
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    rows = [
        (f"({p['harmonic'][0]},{p['harmonic'][1]})", p["freq"][0], p["freq"][1], p["magnitude"])
        for p in est.diagnostics["peak_table"]
    ]
    peaks = report_dir / "peaks.tsv"
    write_tsv(peaks, rows, header=("harmonic", "fx_cycles_per_px", "fy_cycles_per_px", "magnitude"))
    summary = report_dir / "summary.tsv"
    srows = [
        ("period_px", est.period_px),
        ("rotation_deg", est.rotation_deg),
        ("confidence", est.confidence),
        ("peak_to_background", est.diagnostics.get("peak_to_background", float("nan"))),
    ]
    if verdict is not None:
        srows.append(("nyquist_ok", verdict.ok))
        srows.append(("px_per_patch", verdict.px_per_patch))
    write_tsv(summary, srows, header=("key", "value"))
    fig = spectrum_figure(est, report_dir / "carriers.png")
    return [str(peaks), str(summary), fig]
