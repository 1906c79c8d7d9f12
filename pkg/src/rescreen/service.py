"""Loopback HTTP service the registration studio drives.

One mutable project per instance.  Mutations take the writer lock and swap
whole value objects; tile renders work from a snapshot taken under the
lock, so a concurrent PATCH is either fully visible or not at all.
"""
from __future__ import annotations

import io
import threading

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from PIL import Image

import numpy as np

from .errors import ProjectError, RescreenError, Unregistered, ViewportOutOfBounds
from .geometry import compose_map, decompose_map, scan_to_screen, screen_to_scan
from .project import (
    PREVIEW_STAGES,
    ProjectState,
    load_project,
    preview_tile,
    project_to_bytes,
)
from .raster import ChannelMix
from .registration import register_auto
from .render import RenderParams

_REG_KEYS = (
    "rotation_deg",
    "scale_x_px",
    "scale_y_px",
    "skew_px",
    "dx_px",
    "dy_px",
    "perspective_x",
    "perspective_y",
    "k1",
    "k2",
)


class ServiceState:
    """ProjectState plus the single-writer lock and snapshot machinery."""

    def __init__(self, state: ProjectState):
        self.state = state
        self.lock = threading.Lock()

    def snapshot(self) -> ProjectState:
        with self.lock:
            st = self.state
            clone = ProjectState(st.project, st.path)
            clone._source = st._source
            clone._mono = st._mono
            clone._positive = st._positive
            return clone

    def absorb(self, clone: ProjectState) -> None:
        """Keep rasters a snapshot had to compute, if nothing changed since."""
        with self.lock:
            st = self.state
            if st.project is not clone.project:
                return
            st._source = st._source or clone._source
            st._mono = st._mono or clone._mono
            st._positive = st._positive or clone._positive

    def mutate(self, **changes) -> None:
        with self.lock:
            self.state.update(**changes)


def _num(value, name: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ProjectError(f"{name} must be a number, got {value!r}") from None


def _apply_registration(state: ProjectState, absolute: dict, delta: dict):
    m = state.project.map
    if m is None:
        raise Unregistered("no registration map to edit; run auto registration first")
    params = decompose_map(m)
    for k, v in absolute.items():
        if k not in _REG_KEYS:
            raise ProjectError(f"unknown registration parameter {k!r}")
        params[k] = _num(v, k)
    for k, v in delta.items():
        if k not in _REG_KEYS:
            raise ProjectError(f"unknown registration parameter {k!r}")
        params[k] = params[k] + _num(v, k)
    new = compose_map(
        **params, principal_point=m.principal_point, norm_radius_px=m.norm_radius_px
    )
    # a rotation or scale nudge should pivot about the middle of the scan,
    # not the lattice origin, or the whole view swims; keep whatever screen
    # point sits at the scan center pinned there unless the edit itself
    # moves the offsets
    edited = set(absolute) | set(delta)
    if edited - {"dx_px", "dy_px"} and not edited & {"dx_px", "dy_px"}:
        mono = state.working_mono()
        center = np.array([(mono.width - 1) / 2.0, (mono.height - 1) / 2.0])
        anchor = scan_to_screen(m, center)
        drift = screen_to_scan(new, anchor) - center
        params["dx_px"] -= float(drift[0])
        params["dy_px"] -= float(drift[1])
        new = compose_map(
            **params, principal_point=m.principal_point, norm_radius_px=m.norm_radius_px
        )
    return new


def _merged_render(current: RenderParams, patch: dict) -> RenderParams:
    fields = {
        "exposure": current.exposure,
        "white_balance": current.white_balance,
        "saturation": current.saturation,
        "output_space": current.output_space,
        "mode": current.mode,
    }
    for k, v in patch.items():
        if k not in fields:
            raise ProjectError(f"unknown render parameter {k!r}")
        fields[k] = v
    try:
        fields["white_balance"] = tuple(fields["white_balance"])
        return RenderParams(**fields)
    except (TypeError, ValueError) as e:
        raise ProjectError(str(e)) from e


def _state_payload(state: ProjectState) -> dict:
    p = state.project
    mono = state.working_mono()
    return {
        "version": 1,
        "path": None if state.path is None else str(state.path),
        "registered": p.registered,
        "scan": {"width": mono.width, "height": mono.height, "ppi": mono.ppi},
        "registration": None if p.map is None else decompose_map(p.map),
        "project": p.to_dict(),
    }


def build_app(service: ServiceState) -> FastAPI:
    app = FastAPI(title="plate reconstruction service", docs_url=None, redoc_url=None)

    @app.exception_handler(RescreenError)
    async def _domain_error(request: Request, exc: RescreenError):
        status = 409 if isinstance(exc, Unregistered) else 422
        return JSONResponse(
            status_code=status, content={"error": type(exc).__name__, "detail": str(exc)}
        )

    @app.get("/state")
    async def get_state():
        snap = service.snapshot()
        payload = _state_payload(snap)
        service.absorb(snap)
        return payload

    @app.patch("/state")
    async def patch_state(request: Request):
        body = await request.json()
        if not isinstance(body, dict):
            raise ProjectError("PATCH body must be a JSON object")
        known = {"registration", "registration_delta", "render", "inversion", "sharpen", "mix"}
        unknown = set(body) - known
        if unknown:
            raise ProjectError(f"unknown state sections {sorted(unknown)}")
        with service.lock:
            st = service.state
            changes: dict = {}
            if "registration" in body or "registration_delta" in body:
                changes["map"] = _apply_registration(
                    st, body.get("registration", {}), body.get("registration_delta", {})
                )
            if "render" in body:
                changes["render"] = _merged_render(st.project.render, body["render"])
            if "inversion" in body:
                inv = body["inversion"]
                if set(inv) - {"enabled", "gamma", "t_floor"}:
                    raise ProjectError("inversion accepts enabled, gamma, t_floor")
                if "enabled" in inv:
                    changes["invert_enabled"] = bool(inv["enabled"])
                if "gamma" in inv:
                    changes["invert_gamma"] = _num(inv["gamma"], "gamma")
                if "t_floor" in inv:
                    changes["invert_floor"] = _num(inv["t_floor"], "t_floor")
            if "sharpen" in body:
                shp = body["sharpen"]
                if set(shp) - {"enabled", "radius", "amount"}:
                    raise ProjectError("sharpen accepts enabled, radius, amount")
                if "enabled" in shp:
                    changes["sharpen_enabled"] = bool(shp["enabled"])
                if "radius" in shp:
                    changes["sharpen_radius"] = _num(shp["radius"], "radius")
                if "amount" in shp:
                    changes["sharpen_amount"] = _num(shp["amount"], "amount")
            if "mix" in body:
                mix = body["mix"]
                if set(mix) - {"weights", "selected_channel"}:
                    raise ProjectError("mix accepts weights, selected_channel")
                try:
                    changes["mix"] = ChannelMix(
                        weights=tuple(mix.get("weights", st.project.mix.weights)),
                        selected_channel=mix.get(
                            "selected_channel", st.project.mix.selected_channel
                        ),
                    )
                except (TypeError, ValueError) as e:
                    raise ProjectError(str(e)) from e
            st.update(**changes)
        snap = service.snapshot()
        payload = _state_payload(snap)
        service.absorb(snap)
        return payload

    @app.get("/tile")
    async def get_tile(x: float, y: float, w: float, h: float, zoom: float = 1.0, stage: str = "scan"):
        if stage not in PREVIEW_STAGES:
            raise ViewportOutOfBounds(f"stage must be one of {PREVIEW_STAGES}, got {stage!r}")
        snap = service.snapshot()
        arr = preview_tile(snap, (x, y, w, h, zoom), stage)
        service.absorb(snap)
        img = Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L")
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/register/auto")
    async def register_auto_endpoint():
        snap = service.snapshot()
        p = snap.project
        mono = snap.working_mono()
        service.absorb(snap)
        nominal = p.ppi_override if p.ppi_override is not None else mono.ppi
        m, info = register_auto(mono, p.pattern(), nominal, return_info=True)
        service.mutate(map=m)
        return {
            "registration": decompose_map(m),
            "objective": info["objective"],
            "marks_found": info["marks_found"],
            "candidates_scored": info["candidates_scored"],
        }

    @app.post("/save")
    async def save():
        with service.lock:
            st = service.state
            if st.path is None:
                raise ProjectError("service was started without a project path")
            st.path.write_bytes(project_to_bytes(st.project))
            return {"saved": str(st.path)}

    return app


def app_for_project(path) -> FastAPI:
    """Load a project file and build the app, warming the scan cache."""
    state = ProjectState(load_project(path), path)
    state.working_mono()
    return build_app(ServiceState(state))
