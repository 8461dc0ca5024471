"""Revolved sensor-skin geometry.

The sensing skin is a surface of revolution about the z axis: a radius profile
r(z) in millimetres over z in [0, height], with the base ring at z = 0 and the
tip at z = height.  Three profile families are supported:

* ``cylinder_hemisphere`` -- constant radius R up to a cylinder height Hc, then
  a hemispherical cap of radius R (total height Hc + R).
* ``cone`` -- linear taper from the base radius to a point at z = height.
* ``spline`` -- a monotone cubic (PCHIP) interpolant through (z, r) control
  points, single-valued in z by construction.

Points on the surface are addressed by (z, phi) with position
(r(z)·cos phi, r(z)·sin phi, z).  Outward unit normals follow from the profile
derivative.  A rigid probing ball pressed into the skin displaces surface
points onto the ball's far cap along the inward normal; everything outside the
open ball is untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import formats

CYLINDER_HEMISPHERE = "cylinder_hemisphere"
CONE = "cone"
SPLINE = "spline"

KINDS = (CYLINDER_HEMISPHERE, CONE, SPLINE)

# z derivative magnitudes beyond this are treated as a vertical tangent
_DERIV_CLIP = 1e12
_PROFILE_GRID = 4097


@dataclass(frozen=True)
class SensorGeometry:
    """Immutable description of one revolved sensor skin (all lengths mm)."""

    kind: str
    height: float
    gel_thickness: float = 1.75
    base_margin: float = 2.0
    radius_mm: float = 0.0          # cylinder_hemisphere / cone base radius
    cylinder_height: float = 0.0    # cylinder_hemisphere only
    control_points: tuple = ()      # spline only: ((z, r), ...)

    @cached_property
    def _pchip(self) -> PchipInterpolator:
        pts = np.asarray(self.control_points, dtype=np.float64)
        return PchipInterpolator(pts[:, 0], pts[:, 1], extrapolate=False)

    @cached_property
    def _pchip_deriv(self):
        return self._pchip.derivative()

    def radius(self, z):
        """Profile radius r(z); z must lie in [0, height]."""
        z = np.asarray(z, dtype=np.float64)
        if self.kind == CYLINDER_HEMISPHERE:
            cap_sq = np.clip(self.radius_mm**2 - (z - self.cylinder_height) ** 2, 0.0, None)
            r = np.where(z <= self.cylinder_height, self.radius_mm, np.sqrt(cap_sq))
        elif self.kind == CONE:
            r = np.clip(self.radius_mm * (1.0 - z / self.height), 0.0, None)
        else:
            r = np.nan_to_num(self._pchip(np.clip(z, 0.0, self.height)), nan=0.0)
            r = np.clip(r, 0.0, None)
        return r if r.ndim else float(r)

    def radius_deriv(self, z):
        """dr/dz; vertical tangents (hemisphere apex) come back clipped, not inf."""
        z = np.asarray(z, dtype=np.float64)
        if self.kind == CYLINDER_HEMISPHERE:
            dz = z - self.cylinder_height
            cap_sq = np.clip(self.radius_mm**2 - dz**2, 0.0, None)
            safe = np.sqrt(np.clip(cap_sq, 1e-300, None))
            rp = np.where(z <= self.cylinder_height, 0.0, np.clip(-dz / safe, -_DERIV_CLIP, _DERIV_CLIP))
        elif self.kind == CONE:
            rp = np.full_like(z, -self.radius_mm / self.height)
        else:
            rp = np.nan_to_num(self._pchip_deriv(np.clip(z, 0.0, self.height)), nan=0.0)
        return rp if rp.ndim else float(rp)

    @cached_property
    def max_radius(self) -> float:
        zs = np.linspace(0.0, self.height, _PROFILE_GRID)
        return float(np.max(self.radius(zs)))

    @cached_property
    def closed_tip(self) -> bool:
        return bool(self.radius(self.height) < 1e-9)

    @cached_property
    def _profile_table(self):
        """(z, r, dr/dz, area weight) on a fine grid; weight = r·sqrt(1+r'^2).

        Near a vertical tangent the weight is evaluated as hypot(r, r·r') which
        stays finite (it tends to the cap radius at a hemisphere apex).
        """
        z = np.linspace(0.0, self.height, _PROFILE_GRID)
        r = np.asarray(self.radius(z))
        rp = np.asarray(self.radius_deriv(z))
        w = np.hypot(r, r * np.clip(rp, -1e15, 1e15))
        if self.kind == CYLINDER_HEMISPHERE:
            # exact limit on the cap: r·sqrt(1+r'^2) == R
            w = np.where(z > self.cylinder_height, self.radius_mm, w)
        return z, r, rp, w

    def surface_area(self, z_lo: float | None = None, z_hi: float | None = None) -> float:
        """Lateral surface area of the skin between two heights (default full)."""
        z, _, _, w = self._profile_table
        lo = 0.0 if z_lo is None else z_lo
        hi = self.height if z_hi is None else z_hi
        zs = np.linspace(lo, hi, _PROFILE_GRID)
        ws = np.interp(zs, z, w)
        return float(2.0 * np.pi * np.trapezoid(ws, zs))


def make_geometry(kind: str, *, gel_thickness: float = 1.75, base_margin: float = 2.0, **params) -> SensorGeometry:
    """Validated constructor for the three supported profile kinds."""
    if kind not in KINDS:
        raise ValueError(f"unknown geometry kind {kind!r}; expected one of {KINDS}")
    if gel_thickness <= 0:
        raise ValueError("gel_thickness must be positive")
    if kind == CYLINDER_HEMISPHERE:
        radius = float(params.pop("radius_mm"))
        cyl_h = float(params.pop("cylinder_height"))
        if params:
            raise ValueError(f"unexpected parameters for {kind}: {sorted(params)}")
        if radius <= 0 or cyl_h < 0:
            raise ValueError("cylinder_hemisphere needs radius_mm > 0 and cylinder_height >= 0")
        return SensorGeometry(
            kind=kind, height=cyl_h + radius, gel_thickness=gel_thickness,
            base_margin=base_margin, radius_mm=radius, cylinder_height=cyl_h,
        )
    if kind == CONE:
        radius = float(params.pop("radius_mm"))
        height = float(params.pop("height"))
        if params:
            raise ValueError(f"unexpected parameters for {kind}: {sorted(params)}")
        if radius <= 0 or height <= 0:
            raise ValueError("cone needs radius_mm > 0 and height > 0")
        return SensorGeometry(
            kind=kind, height=height, gel_thickness=gel_thickness,
            base_margin=base_margin, radius_mm=radius,
        )
    pts = params.pop("control_points")
    if params:
        raise ValueError(f"unexpected parameters for {kind}: {sorted(params)}")
    pts = tuple((float(z), float(r)) for z, r in pts)
    if len(pts) < 3:
        raise ValueError("spline needs at least 3 control points")
    zs = np.array([p[0] for p in pts])
    rs = np.array([p[1] for p in pts])
    if zs[0] != 0.0:
        raise ValueError("spline control points must start at z = 0")
    if np.any(np.diff(zs) <= 0):
        raise ValueError("spline control-point z values must be strictly increasing")
    if np.any(rs[:-1] <= 0) or rs[-1] < 0:
        raise ValueError("spline radii must be positive (the final radius may be 0)")
    return SensorGeometry(
        kind=kind, height=float(zs[-1]), gel_thickness=gel_thickness,
        base_margin=base_margin, control_points=pts,
    )


@dataclass(frozen=True)
class SurfacePoint:
    """One point on the undeformed skin with its outward unit normal."""

    position: np.ndarray
    outward_normal: np.ndarray
    z: float
    phi: float


@dataclass(frozen=True)
class ProbeBall:
    """Rigid calibration ball (sphere), radius in mm."""

    center: np.ndarray
    radius: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")


def surface_positions(geom: SensorGeometry, z, phi):
    """Vectorized (z, phi) -> xyz positions, shape (..., 3)."""
    z = np.asarray(z, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    r = np.asarray(geom.radius(z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), np.broadcast_to(z, phi.shape).astype(np.float64)], axis=-1)


def surface_normals(geom: SensorGeometry, z, phi):
    """Vectorized outward unit normals; the closed-tip apex maps to +z."""
    z = np.asarray(z, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    rp = np.asarray(geom.radius_deriv(z))
    denom = np.sqrt(1.0 + rp * rp)
    n = np.stack([np.cos(phi) / denom, np.sin(phi) / denom, -rp / denom], axis=-1)
    if geom.closed_tip:
        at_apex = np.broadcast_to(np.asarray(geom.radius(z)) < 1e-12, phi.shape)
        n = np.where(at_apex[..., None], np.array([0.0, 0.0, 1.0]), n)
    return n


def surface_point(geom: SensorGeometry, z: float, phi: float) -> SurfacePoint:
    """Single surface point with validation. z must lie in [0, height]."""
    if not 0.0 <= z <= geom.height:
        raise ValueError(f"z = {z} outside [0, {geom.height}]")
    phi = float(np.mod(phi, 2.0 * np.pi))
    pos = surface_positions(geom, np.float64(z), np.float64(phi))
    nrm = surface_normals(geom, np.float64(z), np.float64(phi))
    return SurfacePoint(position=np.asarray(pos), outward_normal=np.asarray(nrm), z=float(z), phi=phi)


def _area_cdf(geom: SensorGeometry, z_lo: float, z_hi: float, n: int = 2049):
    z_tab, _, _, w_tab = geom._profile_table
    zs = np.linspace(z_lo, z_hi, n)
    ws = np.interp(zs, z_tab, w_tab)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (ws[1:] + ws[:-1]) * np.diff(zs))])
    total = cdf[-1]
    if total <= 0:
        raise ValueError("degenerate sampling band: zero surface area")
    return zs, cdf / total, total * 2.0 * np.pi


_GOLDEN_FRAC = (math.sqrt(5.0) - 1.0) / 2.0


def sample_surface(geom: SensorGeometry, n: int, seed: int, base_margin: float | None = None,
                   z_range: tuple[float, float] | None = None) -> list[SurfacePoint]:
    """Draw n probe points stratified by local surface area.

    Points follow an area-quantile spiral: point k sits in the k-th equal-area
    z slice (jittered inside it) while azimuth advances by the golden-ratio
    fraction of a turn, with sub-slice jitter.  The spiral keeps neighbours
    apart even at a closed tip and spreads small plans around the axis (n = 4
    on a cylinder lands one point per angular quadrant).  Deterministic for a
    fixed seed.  The base margin (default: the geometry's, 2 mm) is excluded;
    z_range overrides the band entirely.
    """
    if n <= 0:
        raise ValueError("need n >= 1 probe points")
    margin = geom.base_margin if base_margin is None else base_margin
    z_lo, z_hi = (margin, geom.height) if z_range is None else z_range
    if not 0.0 <= z_lo < z_hi <= geom.height:
        raise ValueError(f"invalid sampling band [{z_lo}, {z_hi}] for height {geom.height}")
    zs, cdf, _ = _area_cdf(geom, z_lo, z_hi)

    rng = np.random.default_rng(seed)
    k = np.arange(n)
    q = (k + 0.5 + 0.55 * (rng.random(n) - 0.5)) / n
    z_pts = np.interp(q, cdf, zs)
    # fixed 0.08-turn offset keeps the first four spiral azimuths in distinct
    # quadrants; jitter shrinks with n so that property is seed-independent
    turns = np.mod(k * _GOLDEN_FRAC + 0.08 + 0.1 * (rng.random(n) - 0.5) / n, 1.0)
    phi_pts = 2.0 * np.pi * turns
    pos = surface_positions(geom, z_pts, phi_pts)
    nrm = surface_normals(geom, z_pts, phi_pts)
    return [
        SurfacePoint(position=pos[i], outward_normal=nrm[i], z=float(z_pts[i]), phi=float(phi_pts[i]))
        for i in range(n)
    ]


def save_probe_plan(path, plan: list[SurfacePoint]) -> None:
    """CSV probe plan: index,x_mm,y_mm,z_mm,nx,ny,nz."""
    lines = ["index,x_mm,y_mm,z_mm,nx,ny,nz"]
    for i, p in enumerate(plan):
        vals = [*p.position, *p.outward_normal]
        lines.append(str(i) + "," + ",".join(formats.fmt_float(v) for v in vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_probe_plan(path):
    """Returns (positions (N,3), normals (N,3))."""
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "index,x_mm,y_mm,z_mm,nx,ny,nz":
            raise ValueError(f"unexpected probe plan header: {header!r}")
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")[1:]])
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    return arr[:, :3], arr[:, 3:]


def min_surface_distance(geom: SensorGeometry, point) -> float:
    """Distance from a 3-D point to the revolved skin (profile-curve distance)."""
    p = np.asarray(point, dtype=np.float64)
    rho = math.hypot(p[0], p[1])
    z_tab, r_tab, _, _ = geom._profile_table
    return float(np.min(np.hypot(rho - r_tab, p[2] - z_tab)))


def _inside_body(geom: SensorGeometry, point) -> bool:
    p = np.asarray(point, dtype=np.float64)
    if not 0.0 < p[2] < geom.height:
        return False
    return math.hypot(p[0], p[1]) < float(geom.radius(p[2]))


@dataclass(frozen=True)
class Indentation:
    """Displacement field of one rigid-ball press against the undeformed skin.

    Calling displace() maps undeformed surface points to their deformed
    positions: points inside the open ball travel along the inward normal to
    the ball's far cap; everything else is untouched (exactly zero
    displacement).  The travel distance is the per-point indentation depth.
    """

    geom: SensorGeometry
    ball: ProbeBall

    def displace(self, points):
        """points (N,3) on the surface -> (displaced (N,3), depth (N,), contact (N,) bool)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        phi = np.arctan2(p[:, 1], p[:, 0])
        z = np.clip(p[:, 2], 0.0, self.geom.height)
        n = surface_normals(self.geom, z, phi)
        rel = p - self.ball.center
        dist_sq = np.einsum("ij,ij->i", rel, rel)
        contact = dist_sq < self.ball.radius**2
        d = np.einsum("ij,ij->i", n, rel)
        gap = np.clip(self.ball.radius**2 - dist_sq, 0.0, None)
        s = np.where(contact, d + np.sqrt(d * d + gap), 0.0)
        s = np.clip(s, 0.0, None)
        displaced = p - s[:, None] * n
        return displaced, s, contact


def indent(geom: SensorGeometry, ball: ProbeBall) -> Indentation:
    """Build the rigid-ball displacement field; rejects a fully buried ball."""
    if _inside_body(geom, ball.center) and min_surface_distance(geom, ball.center) > ball.radius:
        raise ValueError("ball lies entirely inside the body: no free surface cap to press")
    return Indentation(geom=geom, ball=ball)


def mesh(geom: SensorGeometry, n_angular: int = 256, n_axial: int = 129):
    """Triangulated skin: (vertices (V,3), faces (F,3) int). Closed tips get an apex fan."""
    if n_angular < 3 or n_axial < 2:
        raise ValueError("mesh needs n_angular >= 3 and n_axial >= 2")
    closed = geom.closed_tip
    z_top = geom.height
    zs = np.linspace(0.0, z_top, n_axial)
    ring_zs = zs[:-1] if closed else zs
    phis = 2.0 * np.pi * np.arange(n_angular) / n_angular
    verts = []
    for z in ring_zs:
        r = float(geom.radius(z))
        verts.append(np.stack([r * np.cos(phis), r * np.sin(phis), np.full(n_angular, z)], axis=-1))
    verts = np.concatenate(verts, axis=0)
    if closed:
        verts = np.concatenate([verts, [[0.0, 0.0, z_top]]], axis=0)
    faces = []
    n_rings = len(ring_zs)
    for i in range(n_rings - 1):
        a = i * n_angular + np.arange(n_angular)
        b = (a + 1) % n_angular + i * n_angular
        c = a + n_angular
        d = (a + 1) % n_angular + (i + 1) * n_angular
        faces.append(np.stack([a, b, d], axis=-1))
        faces.append(np.stack([a, d, c], axis=-1))
    if closed:
        apex = len(verts) - 1
        a = (n_rings - 1) * n_angular + np.arange(n_angular)
        b = (a + 1) % n_angular + (n_rings - 1) * n_angular
        faces.append(np.stack([a, b, np.full(n_angular, apex)], axis=-1))
    return verts, np.concatenate(faces, axis=0)
