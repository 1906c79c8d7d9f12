"""Bidirectional map between screen tile coordinates and scan pixels.

Forward model: homogeneous 3x3 matrix (rotation, translation, scale, skew,
perspective) followed by radial lens distortion applied in scan space about
a principal point.  Radii are normalized by a fixed pixel radius (half the
image diagonal by convention) so k1, k2 stay dimensionless and transfer
across scan resolutions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AtInfinity,
    DegenerateConfiguration,
    NoConvergence,
    TooFewPoints,
)

INVERSE_TOL_PX = 1e-3
SELF_CHECK_TOL_TILE = 1e-4


@dataclass(frozen=True)
class RegistrationMap:
    """Screen (tile units) to scan (pixels) parametric map.

    homography is stored with h33 = 1; distortion displaces scan points
    radially about principal_point by (1 + k1 r^2 + k2 r^4) with
    r = |q - principal_point| / norm_radius_px.
    """

    homography: np.ndarray
    k1: float = 0.0
    k2: float = 0.0
    principal_point: tuple = (0.0, 0.0)
    norm_radius_px: float = 1.0

    def __post_init__(self):
        h = np.asarray(self.homography, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(h)):
            raise DegenerateConfiguration("homography has non-finite entries")
        if abs(h[2, 2]) < 1e-12:
            raise DegenerateConfiguration("homography h33 vanishes")
        h = h / h[2, 2]
        if abs(np.linalg.det(h)) < 1e-12:
            raise DegenerateConfiguration("homography is not invertible")
        h.setflags(write=False)
        object.__setattr__(self, "homography", h)
        object.__setattr__(self, "k1", float(self.k1))
        object.__setattr__(self, "k2", float(self.k2))
        pp = (float(self.principal_point[0]), float(self.principal_point[1]))
        object.__setattr__(self, "principal_point", pp)
        if not self.norm_radius_px > 0:
            raise DegenerateConfiguration("norm_radius_px must be positive")
        object.__setattr__(self, "norm_radius_px", float(self.norm_radius_px))
        object.__setattr__(self, "_hinv", np.linalg.inv(h))
        self._self_check()

    @property
    def has_distortion(self) -> bool:
        return self.k1 != 0.0 or self.k2 != 0.0

    def _self_check(self):
        # round-trip probe on a 5x5 grid across the distortion-normalized
        # neighborhood; failure means the map is not usable for rendering
        pp = np.array(self.principal_point)
        span = 0.7 * self.norm_radius_px
        t = np.linspace(-span, span, 5)
        qx, qy = np.meshgrid(pp[0] + t, pp[1] + t)
        q = np.stack([qx, qy], axis=-1).reshape(-1, 2)
        p, valid = scan_to_screen(self, q, return_valid=True)
        if not np.all(valid):
            raise NoConvergence("map inverse fails on the self-check grid")
        q2 = screen_to_scan(self, p)
        p2, valid2 = scan_to_screen(self, q2, return_valid=True)
        err = np.max(np.abs(p2 - p))
        if not np.all(valid2) or not err < SELF_CHECK_TOL_TILE:
            raise NoConvergence(f"self-check round trip error {err:.3g} tile units")


def _distort(m: RegistrationMap, q0: np.ndarray) -> np.ndarray:
    if not m.has_distortion:
        return q0
    pp = np.array(m.principal_point)
    d = q0 - pp
    r2 = (d * d).sum(axis=-1, keepdims=True) / (m.norm_radius_px ** 2)
    return pp + d * (1.0 + m.k1 * r2 + m.k2 * r2 * r2)


def screen_to_scan(m: RegistrationMap, p) -> np.ndarray:
    """Forward map of screen points (..., 2) to scan pixel coordinates."""
    p = np.asarray(p, dtype=np.float64)
    scalar = p.ndim == 1
    pts = np.atleast_2d(p)
    h = m.homography
    w = h[2, 0] * pts[..., 0] + h[2, 1] * pts[..., 1] + h[2, 2]
    if np.any(np.abs(w) < 1e-12):
        raise AtInfinity("screen point maps to the line at infinity")
    x = (h[0, 0] * pts[..., 0] + h[0, 1] * pts[..., 1] + h[0, 2]) / w
    y = (h[1, 0] * pts[..., 0] + h[1, 1] * pts[..., 1] + h[1, 2]) / w
    q = _distort(m, np.stack([x, y], axis=-1))
    return q[0] if scalar else q.reshape(p.shape)


def _undistort_points(q, pp, norm_radius, k1, k2, tol_px):
    """Invert the radial displacement; exact because direction is preserved.

    Returns (undistorted points, per-point success flag).
    """
    if k1 == 0.0 and k2 == 0.0:
        return q, np.ones(q.shape[:-1], dtype=bool)
    pp = np.asarray(pp, dtype=np.float64)
    d = q - pp
    r_d = np.sqrt((d * d).sum(axis=-1)) / norm_radius
    r = r_d.copy()
    tol = tol_px / norm_radius
    f = np.zeros_like(r)
    for _ in range(20):
        r2 = r * r
        f = r * (1.0 + k1 * r2 + k2 * r2 * r2) - r_d
        if np.all(np.abs(f) < tol):
            break
        fp = 1.0 + 3.0 * k1 * r2 + 5.0 * k2 * r2 * r2
        fp = np.where(np.abs(fp) < 1e-9, np.copysign(1e-9, fp), fp)
        # damped step so non-monotone radii cannot fling the iterate away
        r = r - np.clip(f / fp, -0.25, 0.25)
        r = np.maximum(r, 0.0)
    ok = np.abs(f) < tol
    scale = np.where(r_d > 0, r / np.maximum(r_d, 1e-300), 1.0)
    return pp + d * scale[..., None], ok


def _undistort(m: RegistrationMap, q: np.ndarray, tol_px: float):
    return _undistort_points(q, m.principal_point, m.norm_radius_px, m.k1, m.k2, tol_px)


def scan_to_screen(m: RegistrationMap, q, *, return_valid: bool = False):
    """Inverse map of scan points (..., 2) back to screen tile coordinates.

    With return_valid a (points, mask) pair comes back and failed pixels are
    flagged instead of raising; callers treat those pixels as unmapped.
    """
    q = np.asarray(q, dtype=np.float64)
    scalar = q.ndim == 1
    pts = np.atleast_2d(q.reshape(-1, 2))
    q0, ok = _undistort(m, pts, INVERSE_TOL_PX)
    hinv = m._hinv
    w = hinv[2, 0] * q0[..., 0] + hinv[2, 1] * q0[..., 1] + hinv[2, 2]
    bad_w = np.abs(w) < 1e-12
    ok = ok & ~bad_w
    w = np.where(bad_w, 1.0, w)
    x = (hinv[0, 0] * q0[..., 0] + hinv[0, 1] * q0[..., 1] + hinv[0, 2]) / w
    y = (hinv[1, 0] * q0[..., 0] + hinv[1, 1] * q0[..., 1] + hinv[1, 2]) / w
    p = np.stack([x, y], axis=-1)
    if return_valid:
        if scalar:
            return p[0], bool(ok[0])
        return p.reshape(q.shape), ok.reshape(q.shape[:-1])
    if not np.all(ok):
        raise NoConvergence("inverse map did not converge for some points")
    return p[0] if scalar else p.reshape(q.shape)


def _homogeneous(pts):
    return np.concatenate([pts, np.ones((len(pts), 1))], axis=1)


def _similarity_normalizer(pts):
    c = pts.mean(axis=0)
    spread = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / spread if spread > 1e-12 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _check_not_collinear(pts, label):
    c = pts - pts.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] / sv[0] < 1e-9:
        raise DegenerateConfiguration(f"{label} points are collinear")


def _dlt(P, Q):
    Tp = _similarity_normalizer(P)
    Tq = _similarity_normalizer(Q)
    Pn = (Tp @ _homogeneous(P).T).T
    Qn = (Tq @ _homogeneous(Q).T).T
    n = len(P)
    A = np.zeros((2 * n, 9))
    x, y = Pn[:, 0], Pn[:, 1]
    u, v = Qn[:, 0], Qn[:, 1]
    A[0::2, 0] = -x
    A[0::2, 1] = -y
    A[0::2, 2] = -1.0
    A[0::2, 6] = u * x
    A[0::2, 7] = u * y
    A[0::2, 8] = u
    A[1::2, 3] = -x
    A[1::2, 4] = -y
    A[1::2, 5] = -1.0
    A[1::2, 6] = v * x
    A[1::2, 7] = v * y
    A[1::2, 8] = v
    _, _, vt = np.linalg.svd(A)
    H = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tq) @ H @ Tp
    if abs(H[2, 2]) < 1e-12:
        raise DegenerateConfiguration("estimated homography is degenerate")
    return H / H[2, 2]


@dataclass(frozen=True)
class FitResult:
    map: RegistrationMap
    residual_rms_px: float
    n_points: int


def fit_map(
    correspondences,
    fit_distortion: bool = False,
    *,
    principal_point=None,
    norm_radius_px=None,
) -> FitResult:
    """Least-squares map from (screen point, scan point) pairs.

    Homography by normalized direct linear transform; with fit_distortion the
    homography and (k1, k2) are refined alternately against the residuals.
    """
    pairs = list(correspondences)
    P = np.array([p for p, _ in pairs], dtype=np.float64).reshape(-1, 2)
    Q = np.array([q for _, q in pairs], dtype=np.float64).reshape(-1, 2)
    need = 8 if fit_distortion else 4
    if len(P) < need:
        raise TooFewPoints(f"need at least {need} correspondences, got {len(P)}")
    _check_not_collinear(P, "screen")
    _check_not_collinear(Q, "scan")

    if principal_point is None:
        principal_point = tuple(Q.mean(axis=0))
    pp = np.asarray(principal_point, dtype=np.float64)
    if norm_radius_px is None:
        norm_radius_px = float(np.sqrt(((Q - pp) ** 2).sum(axis=1)).max())
        norm_radius_px = max(norm_radius_px, 1.0)

    k1 = k2 = 0.0
    H = _dlt(P, Q)
    if fit_distortion:
        for _ in range(30):
            # alternate: undistort targets under current k and refit H, then
            # re-solve the radial profile.  The profile fit includes a global
            # scale column folded back into H; without it the homography and
            # k1/k2 trade off against each other and convergence crawls.
            Q0, ok = _undistort_points(Q, pp, norm_radius_px, k1, k2, INVERSE_TOL_PX)
            if not np.all(ok):
                break
            H = _dlt(P, Q0)
            Ph = (H @ _homogeneous(P).T).T
            base = Ph[:, :2] / Ph[:, 2:3]
            d = base - pp
            r2 = ((d ** 2).sum(axis=1) / norm_radius_px ** 2)[:, None]
            design = np.column_stack([d.ravel(), (d * r2).ravel(), (d * r2 * r2).ravel()])
            sol, *_ = np.linalg.lstsq(design, (Q - pp).ravel(), rcond=None)
            s = float(sol[0])
            if not 0.1 < s < 10.0:
                break
            fold = np.array(
                [[s, 0.0, (1 - s) * pp[0]], [0.0, s, (1 - s) * pp[1]], [0.0, 0.0, 1.0]]
            )
            H = fold @ H
            H /= H[2, 2]
            new_k1, new_k2 = float(sol[1]) / s, float(sol[2]) / s
            if abs(new_k1 - k1) < 1e-14 and abs(new_k2 - k2) < 1e-14:
                k1, k2 = new_k1, new_k2
                break
            k1, k2 = new_k1, new_k2

    m = RegistrationMap(H, k1, k2, tuple(pp), norm_radius_px=norm_radius_px)
    rms = float(np.sqrt(np.mean(((screen_to_scan(m, P) - Q) ** 2).sum(axis=1))))
    return FitResult(map=m, residual_rms_px=rms, n_points=len(P))


@dataclass(frozen=True)
class NyquistVerdict:
    ok: bool
    px_per_patch: float


def nyquist_gate(m: RegistrationMap, pattern, raster) -> NyquistVerdict:
    """Median pixels spanned by one patch step; ok iff at least 2."""
    w, h = raster.width, raster.height
    corners = np.array([[0, 0], [w - 1.0, 0], [0, h - 1.0], [w - 1.0, h - 1.0]])
    p_corners, ok = scan_to_screen(m, corners, return_valid=True)
    p_corners = p_corners[ok]
    lo = p_corners.min(axis=0)
    hi = p_corners.max(axis=0)
    t = np.linspace(0.05, 0.95, 7)
    gx, gy = np.meshgrid(lo[0] + t * (hi[0] - lo[0]), lo[1] + t * (hi[1] - lo[1]))
    p = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    step = 1.0 / pattern.patches_per_tile
    base = screen_to_scan(m, p)
    dx = screen_to_scan(m, p + [step, 0.0]) - base
    dy = screen_to_scan(m, p + [0.0, step]) - base
    spans = np.concatenate([np.sqrt((dx ** 2).sum(axis=1)), np.sqrt((dy ** 2).sum(axis=1))])
    ppp = float(np.median(spans))
    return NyquistVerdict(ok=ppp >= 2.0 - 1e-9, px_per_patch=ppp)


def decompose_map(m: RegistrationMap) -> dict:
    """Human-readable parameters: rotation/scale/skew/offset + perspective.

    Convention: upper-left 2x2 = R(rotation) @ [[scale_x, skew], [0, scale_y]]
    with scales in px per tile.
    """
    h = m.homography
    a, b, c, d = h[0, 0], h[0, 1], h[1, 0], h[1, 1]
    scale_x = float(np.hypot(a, c))
    rotation = float(np.degrees(np.arctan2(c, a)))
    skew = float((a * b + c * d) / scale_x)
    scale_y = float((a * d - b * c) / scale_x)
    return {
        "rotation_deg": rotation,
        "scale_x_px": scale_x,
        "scale_y_px": scale_y,
        "skew_px": skew,
        "dx_px": float(h[0, 2]),
        "dy_px": float(h[1, 2]),
        "perspective_x": float(h[2, 0]),
        "perspective_y": float(h[2, 1]),
        "k1": m.k1,
        "k2": m.k2,
    }


def compose_map(
    *,
    rotation_deg: float,
    scale_x_px: float,
    scale_y_px: float | None = None,
    skew_px: float = 0.0,
    dx_px: float = 0.0,
    dy_px: float = 0.0,
    perspective_x: float = 0.0,
    perspective_y: float = 0.0,
    k1: float = 0.0,
    k2: float = 0.0,
    principal_point=(0.0, 0.0),
    norm_radius_px: float = 1.0,
) -> RegistrationMap:
    """Inverse of decompose_map; the round trip is exact to float precision."""
    if scale_y_px is None:
        scale_y_px = scale_x_px
    th = np.radians(rotation_deg)
    cos, sin = np.cos(th), np.sin(th)
    rot = np.array([[cos, -sin], [sin, cos]])
    shear = np.array([[scale_x_px, skew_px], [0.0, scale_y_px]])
    A = rot @ shear
    h = np.array(
        [
            [A[0, 0], A[0, 1], dx_px],
            [A[1, 0], A[1, 1], dy_px],
            [perspective_x, perspective_y, 1.0],
        ]
    )
    return RegistrationMap(h, k1, k2, tuple(principal_point), norm_radius_px=norm_radius_px)


def map_to_dict(m: RegistrationMap) -> dict:
    """Serializable form: 9 homography entries row-major (h33 = 1), the
    distortion parameters, and the decomposed display block."""
    return {
        "homography": [float(x) for x in m.homography.ravel()],
        "k1": m.k1,
        "k2": m.k2,
        "principal_point": [m.principal_point[0], m.principal_point[1]],
        "norm_radius_px": m.norm_radius_px,
        "display": decompose_map(m),
    }


def map_from_dict(d: dict) -> RegistrationMap:
    return RegistrationMap(
        np.array(d["homography"], dtype=np.float64).reshape(3, 3),
        float(d.get("k1", 0.0)),
        float(d.get("k2", 0.0)),
        tuple(d.get("principal_point", (0.0, 0.0))),
        norm_radius_px=float(d.get("norm_radius_px", 1.0)),
    )
