"""Viewport extraction on the sphere.

Conventions used throughout:

* ERP arrays are ``(height, width, 3)`` floats in [0, 1]; row 0 is latitude +90,
  column 0 is longitude -180.
* A continuous ERP coordinate ``(u, v)`` addresses pixel ``(floor(u), floor(v))``;
  the center of pixel ``(j, r)`` sits at ``(j + 0.5, r + 0.5)``.
* Viewport offsets ``(w, h)`` are measured from the viewport center with ``h``
  pointing up, so pixel ``(col, row)`` has ``w = col + 0.5 - W/2`` and
  ``h = H/2 - row - 0.5``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CoverageError",
    "ExtractionPlan",
    "FieldOfView",
    "Viewport",
    "ViewportCenter",
    "bilinear_sample",
    "center_direction",
    "covers",
    "default_plan",
    "erp_to_sphere",
    "extract_viewport",
    "extract_all",
    "pixel_budget",
    "plan_coverage",
    "reassemble_erp",
    "rotation_matrix",
    "sphere_to_erp",
    "sphere_to_viewport",
    "validate_erp",
    "viewport_to_sphere",
]


class CoverageError(ValueError):
    """Raised when an ERP direction is not covered by any viewport."""


@dataclass(frozen=True)
class FieldOfView:
    f_h: float = 90.0
    f_v: float = 90.0

    def __post_init__(self):
        for name in ("f_h", "f_v"):
            val = getattr(self, name)
            if not (0.0 < val < 180.0) or not math.isfinite(val):
                raise ValueError(f"FoV {name}={val} must lie strictly inside (0, 180) degrees")

    @property
    def tan_half(self) -> tuple[float, float]:
        return math.tan(math.radians(self.f_h) / 2), math.tan(math.radians(self.f_v) / 2)


@dataclass(frozen=True)
class ViewportCenter:
    """Viewport center in degrees.

    Longitudes in [-180, 360) are accepted so that plans can be written in the
    0..360 style (``(270, 0)``); the rotation is periodic so both spellings
    describe the same direction.
    """

    lon: float
    lat: float

    def __post_init__(self):
        if not (-180.0 <= self.lon < 360.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 360)")
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")


@dataclass
class Viewport:
    center: ViewportCenter
    fov: FieldOfView
    pixels: np.ndarray  # (H_vp, W_vp, 3)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] <= 0 or self.pixels.shape[1] <= 0:
            raise ValueError(f"viewport pixels must be (H, W, C), got {self.pixels.shape}")

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[0]


@dataclass(frozen=True)
class ExtractionPlan:
    fov: FieldOfView
    centers: tuple[ViewportCenter, ...]
    viewport_dims: tuple[int, int] = field(default=(0, 0))  # (W_vp, H_vp)

    def __post_init__(self):
        if not self.centers:
            raise ValueError("an extraction plan needs at least one center")

    def __len__(self):
        return len(self.centers)

    def with_dims(self, dims: tuple[int, int]) -> "ExtractionPlan":
        return ExtractionPlan(self.fov, self.centers, (int(dims[0]), int(dims[1])))

    def to_dict(self) -> dict:
        return {
            "fov": [self.fov.f_h, self.fov.f_v],
            "dims": list(self.viewport_dims),
            "centers": [[c.lon, c.lat] for c in self.centers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionPlan":
        return cls(
            FieldOfView(*d["fov"]),
            tuple(ViewportCenter(float(lo), float(la)) for lo, la in d["centers"]),
            tuple(d["dims"]),
        )


def validate_erp(erp: np.ndarray) -> np.ndarray:
    erp = np.asarray(erp)
    if erp.ndim != 3:
        raise ValueError(f"ERP must be (H, W, C), got shape {erp.shape}")
    h, w = erp.shape[:2]
    if w != 2 * h:
        raise ValueError(f"ERP width must be twice its height, got {w}x{h}")
    if erp.size and (erp.min() < 0.0 or erp.max() > 1.0):
        raise ValueError("ERP pixel values must lie in [0, 1]")
    return erp


def viewport_to_sphere(w, h, fov: FieldOfView, dims):
    """Map viewport offsets to a point on the tangent plane ``c = 1``.

    Works elementwise on arrays. The result is not normalized.
    """
    W, H = dims
    th, tv = fov.tan_half
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    a = 2.0 * w / W * th
    b = 2.0 * h / H * tv
    return a, b, np.ones_like(a)


def sphere_to_viewport(a, b, c, fov: FieldOfView, dims):
    """Inverse of :func:`viewport_to_sphere` for directions with ``c > 0``."""
    W, H = dims
    th, tv = fov.tan_half
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    return a / c * W / (2.0 * th), b / c * H / (2.0 * tv)


def rotation_matrix(center: ViewportCenter) -> np.ndarray:
    lon = math.radians(center.lon)
    lat = math.radians(center.lat)
    cl, sl = math.cos(lon), math.sin(lon)
    cp, sp = math.cos(lat), math.sin(lat)
    return np.array(
        [
            [cl, -sl * sp, sl * cp],
            [0.0, cp, sp],
            [-sl, -cl * sp, cl * cp],
        ]
    )


def center_direction(center: ViewportCenter) -> np.ndarray:
    return rotation_matrix(center)[:, 2]


def sphere_to_erp(a, b, c, erp_dims):
    """Direction(s) to continuous ERP coordinates ``(u, v)``.

    ``erp_dims`` is ``(height, width)``. Longitude is ``atan2(a, c)``, so the
    poles (``a = c = 0``) land on ``u = width / 2``.
    """
    height, width = erp_dims
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    norm = np.sqrt(a * a + b * b + c * c)
    if np.any(norm == 0):
        raise ValueError("cannot map the zero vector to the sphere")
    lon = np.degrees(np.arctan2(a, c))
    lat = np.degrees(np.arcsin(np.clip(b / norm, -1.0, 1.0)))
    u = width * (lon + 180.0) / 360.0
    v = height * (90.0 - lat) / 180.0
    u = np.where(u >= width, u - width, u)
    return u, v


def erp_to_sphere(u, v, erp_dims):
    """Continuous ERP coordinates to unit directions ``(a, b, c)``."""
    height, width = erp_dims
    lon = np.radians(np.asarray(u, dtype=np.float64) / width * 360.0 - 180.0)
    lat = np.radians(90.0 - np.asarray(v, dtype=np.float64) / height * 180.0)
    cl = np.cos(lat)
    return cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)


def bilinear_sample(img: np.ndarray, u, v, wrap_x: bool = True) -> np.ndarray:
    """Sample ``img`` at continuous coordinates with the pixel-center convention.

    Rows are clamped; columns wrap when ``wrap_x`` (ERP longitude) and clamp
    otherwise.
    """
    H, W = img.shape[:2]
    x = np.asarray(u, dtype=np.float64) - 0.5
    y = np.asarray(v, dtype=np.float64) - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = np.clip(y0 + 1, 0, H - 1)
    y0 = np.clip(y0, 0, H - 1)
    if wrap_x:
        x0 %= W
        x1 %= W
    else:
        x0 = np.clip(x0, 0, W - 1)
        x1 = np.clip(x1, 0, W - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _viewport_grid(dims):
    W, H = dims
    w = np.arange(W, dtype=np.float64) + 0.5 - W / 2.0
    h = H / 2.0 - (np.arange(H, dtype=np.float64) + 0.5)
    return np.meshgrid(w, h)


def extract_viewport(erp: np.ndarray, center: ViewportCenter, fov: FieldOfView, dims) -> Viewport:
    """Resample the tangent-plane window around ``center`` out of an ERP image."""
    erp = validate_erp(erp)
    W, H = int(dims[0]), int(dims[1])
    if W <= 0 or H <= 0:
        raise ValueError(f"viewport dims must be positive, got {dims}")
    ww, hh = _viewport_grid((W, H))
    a, b, c = viewport_to_sphere(ww, hh, fov, (W, H))
    R = rotation_matrix(center)
    d = np.einsum("ij,jhw->ihw", R, np.stack([a, b, c]))
    u, v = sphere_to_erp(d[0], d[1], d[2], erp.shape[:2])
    pix = np.clip(bilinear_sample(erp, u, v, wrap_x=True), 0.0, 1.0)
    return Viewport(center, fov, pix)


def extract_all(erp: np.ndarray, plan: ExtractionPlan) -> list[Viewport]:
    return [extract_viewport(erp, c, plan.fov, plan.viewport_dims) for c in plan.centers]


def _row_latitudes(f_v: float) -> list[float]:
    lats = [0.0]
    k = 1
    while True:
        lat = min(k * f_v, 90.0)
        lats += [lat, -lat]
        if lat >= 90.0:
            return lats
        k += 1


def plan_coverage(fov: FieldOfView, dims=(0, 0)) -> ExtractionPlan:
    """Rows of viewport centers covering the sphere for a given FoV.

    Rows sit at latitude 0, then +F_v, -F_v, +2F_v, ... clipped at the poles.
    Each row holds ``max(1, ceil(360 / F_h * cos(lat)))`` centers, evenly
    spaced in longitude starting from 0.
    """
    if not isinstance(fov, FieldOfView):
        fov = FieldOfView(*fov)
    centers = []
    for lat in _row_latitudes(fov.f_v):
        # cos(90 deg) is ~6e-17, not 0; round away float noise before ceil
        ratio = round(360.0 / fov.f_h * math.cos(math.radians(lat)), 9)
        count = max(1, math.ceil(ratio))
        step = 360.0 / count
        centers += [ViewportCenter(k * step, lat) for k in range(count)]
    return ExtractionPlan(fov, tuple(centers), tuple(int(x) for x in dims))


def default_plan(erp_height: int) -> ExtractionPlan:
    """The six-viewport, 90 degree plan at equatorial ERP pixel density."""
    side = erp_height // 2
    return plan_coverage(FieldOfView(90.0, 90.0), (side, side))


def covers(plan: ExtractionPlan, directions: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Boolean ``(n_centers, ...)`` mask: does each frustum contain each direction."""
    th, tv = plan.fov.tan_half
    out = []
    for center in plan.centers:
        R = rotation_matrix(center)
        loc = np.einsum("ji,j...->i...", R, directions)  # R^T d
        a, b, c = loc
        with np.errstate(divide="ignore", invalid="ignore"):
            inside = (c > 0) & (np.abs(a / c) <= th + tol) & (np.abs(b / c) <= tv + tol)
        out.append(inside)
    return np.stack(out)


def reassemble_erp(viewports: list[Viewport], erp_dims) -> np.ndarray:
    """Rebuild an ERP image from viewports.

    Every ERP pixel takes its value from the covering viewport whose center is
    angularly nearest (first in list order on ties).
    """
    if not viewports:
        raise CoverageError("no viewports to reassemble")
    height, width = erp_dims
    uu, vv = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    d = np.stack(erp_to_sphere(uu, vv, (height, width)))
    channels = viewports[0].pixels.shape[2]
    best = np.full((height, width), -np.inf)
    choice = np.full((height, width), -1, dtype=np.int64)
    for idx, vp in enumerate(viewports):
        plan = ExtractionPlan(vp.fov, (vp.center,), vp.dims)
        inside = covers(plan, d)[0]
        score = np.einsum("i,ihw->hw", center_direction(vp.center), d)
        better = inside & (score > best)
        best = np.where(better, score, best)
        choice = np.where(better, idx, choice)
    if np.any(choice < 0):
        r, col = np.argwhere(choice < 0)[0]
        lon = (col + 0.5) / width * 360.0 - 180.0
        lat = 90.0 - (r + 0.5) / height * 180.0
        raise CoverageError(f"ERP direction (lon={lon:.3f}, lat={lat:.3f}) is not covered by any viewport")
    out = np.zeros((height, width, channels))
    for idx, vp in enumerate(viewports):
        sel = choice == idx
        if not sel.any():
            continue
        R = rotation_matrix(vp.center)
        loc = R.T @ d[:, sel]
        w, h = sphere_to_viewport(loc[0], loc[1], loc[2], vp.fov, vp.dims)
        W, H = vp.dims
        out[sel] = bilinear_sample(vp.pixels, w + W / 2.0, H / 2.0 - h, wrap_x=False)
    return np.clip(out, 0.0, 1.0)


def pixel_budget(plan: ExtractionPlan, erp_dims) -> tuple[int, int, float]:
    """(viewport pixels, ERP pixels, ratio) for coding ``plan`` instead of the ERP."""
    W, H = plan.viewport_dims
    vp = len(plan) * int(W) * int(H)
    erp = int(erp_dims[0]) * int(erp_dims[1])
    return vp, erp, vp / erp
