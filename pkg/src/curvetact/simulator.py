"""Ray-cast photometric renderer: the hardware stand-in and ground-truth oracle.

The camera sits inside the hollow sensor body and sees the reflective coating
on the outer gel surface, i.e. the revolved profile itself.  Two orthogonal
LED fins (red in the XZ plane, green in YZ) and a blue base ring light the
coating; shading is single-bounce semi-specular Phong.  Pressing a rigid ball
replaces the surface with the ball's spherical cap wherever the cap is hit
first, so difference images are exactly zero outside the contact region.

Fidelity limits, by design: no interreflection, no gel translucency, no
shadowing of one fin's light by the other fin; LED directivity is a cosine
lobe around the emit direction with inverse-square falloff.

Image arrays are (H, W, 3) float in [0, 1]; depth maps are mm along the ray;
gradient fields are (H, W, 2) in mm per pixel, ordered (d/du, d/dv).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.ndimage

from .geometry import (ProbeBall, SensorGeometry, SurfacePoint, sample_surface,
                       surface_normals, surface_positions)
from .optics import CameraPose, unproject

_MARCH_STEPS = 192
_BISECT_STEPS = 48
CONTACT_EPSILON = 0.01

_FULL3 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class LedFin:
    """Rectangular LED board: a thin slab with point emitters on both faces."""

    center: np.ndarray
    normal: np.ndarray
    width_axis: np.ndarray
    up_axis: np.ndarray
    half_width: float
    half_height: float
    positions: np.ndarray
    directions: np.ndarray
    # clearance column around the camera's optical path: the board is split
    # into two wings covering inner_margin <= |w| <= half_width
    inner_margin: float = 0.0

    def __post_init__(self):
        for name in ("center", "normal", "width_axis", "up_axis", "positions", "directions"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for ax in (self.normal, self.width_axis, self.up_axis):
            if abs(np.linalg.norm(ax) - 1.0) > 1e-9:
                raise ValueError("fin axes must be unit vectors")
        if not 0.0 <= self.inner_margin < self.half_width:
            raise ValueError("inner_margin must be in [0, half_width)")


@dataclass(frozen=True)
class ShadingParams:
    kd: float = 0.4
    ks: float = 0.5
    p: float = 16.0
    ambient: float = 0.02
    inverse_square: bool = True

    def __post_init__(self):
        if self.kd < 0 or self.ks < 0:
            raise ValueError("kd and ks must be non-negative")
        if self.kd + self.ks > 1.5:
            raise ValueError("kd + ks must leave clipping headroom (<= 1.5)")
        if self.p < 1:
            raise ValueError("specular exponent must be >= 1")
        if not 0 <= self.ambient <= 1:
            raise ValueError("ambient must be in [0, 1]")


@dataclass(frozen=True)
class LedRig:
    red: LedFin
    green: LedFin
    blue_positions: np.ndarray
    blue_directions: np.ndarray
    fin_thickness: float = 0.7
    intensities: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        bp = np.asarray(self.blue_positions, dtype=np.float64)
        bd = np.asarray(self.blue_directions, dtype=np.float64)
        bp.setflags(write=False)
        bd.setflags(write=False)
        object.__setattr__(self, "blue_positions", bp)
        object.__setattr__(self, "blue_directions", bd)
        object.__setattr__(self, "intensities", tuple(float(v) for v in self.intensities))
        if self.fin_thickness < 0:
            raise ValueError("fin thickness must be non-negative")
        if abs(float(np.dot(self.red.normal, self.green.normal))) > 1e-12:
            raise ValueError("red and green fins must be orthogonal")
        if bp.size and np.max(np.abs(bp[:, :2].mean(axis=0))) > 1e-9:
            raise ValueError("blue ring must be centered on the z axis")

    def rotated_z(self, angle: float) -> "LedRig":
        """The rig rigidly rotated about the z axis (for symmetry checks)."""
        c, s = math.cos(angle), math.sin(angle)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

        def rot_fin(fin):
            return LedFin(
                center=R @ fin.center,
                normal=R @ fin.normal,
                width_axis=R @ fin.width_axis,
                up_axis=R @ fin.up_axis,
                half_width=fin.half_width,
                half_height=fin.half_height,
                positions=fin.positions @ R.T,
                directions=fin.directions @ R.T,
                inner_margin=fin.inner_margin,
            )

        return LedRig(
            red=rot_fin(self.red),
            green=rot_fin(self.green),
            blue_positions=self.blue_positions @ R.T,
            blue_directions=self.blue_directions @ R.T,
            fin_thickness=self.fin_thickness,
            intensities=self.intensities,
        )


@dataclass(frozen=True)
class TactileImage:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError("tactile image must be (H, W, 3)")
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("tactile image values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class GroundTruth:
    depth_map: np.ndarray
    gradient_field: np.ndarray
    contact_mask: np.ndarray
    occlusion_mask: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        if np.any(self.contact_mask & ~self.valid_mask):
            raise ValueError("contact_mask must be a subset of valid_mask")
        if np.any(self.depth_map < 0):
            raise ValueError("depth map must be non-negative")
        expect = _central_gradients(self.depth_map, self.valid_mask)
        if not np.array_equal(expect, self.gradient_field):
            raise ValueError("gradient_field must be the central difference of depth_map")


def _central_gradients(depth, valid):
    """Central differences in mm/pixel where the full 3x3 neighborhood is valid."""
    ok = scipy.ndimage.binary_erosion(valid, structure=_FULL3, border_value=0)
    g = np.zeros(depth.shape + (2,), dtype=np.float64)
    g[1:-1, 1:-1, 0] = (depth[1:-1, 2:] - depth[1:-1, :-2]) / 2.0
    g[1:-1, 1:-1, 1] = (depth[2:, 1:-1] - depth[:-2, 1:-1]) / 2.0
    g[~ok] = 0.0
    return g


def _box_interval(center, axes, extents, origin, dirs):
    """Per-ray parameter interval inside an oriented box (slab method)."""
    lo = np.zeros(len(dirs))
    hi = np.full(len(dirs), np.inf)
    for ax, ext in zip(axes, extents):
        s = float(np.dot(origin - center, ax)) if origin.ndim == 1 else (origin - center) @ ax
        q = dirs @ ax
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (-ext - s) / q
            t1 = (ext - s) / q
        near = np.minimum(t0, t1)
        far = np.maximum(t0, t1)
        parallel = np.abs(q) < 1e-15
        inside_par = np.abs(s) <= ext
        near = np.where(parallel, np.where(inside_par, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside_par, np.inf, -np.inf), far)
        lo = np.maximum(lo, near)
        hi = np.minimum(hi, far)
    return lo, hi


def _fin_boxes(fin, thickness):
    """The fin's solid parts as oriented boxes: one full board, or two wings
    when a clearance column is cut out for the camera."""
    axes = (fin.normal, fin.width_axis, fin.up_axis)
    if fin.inner_margin == 0.0:
        return [(fin.center, axes, (thickness / 2.0, fin.half_width, fin.half_height))]
    w_half = (fin.half_width - fin.inner_margin) / 2.0
    w_mid = (fin.half_width + fin.inner_margin) / 2.0
    ext = (thickness / 2.0, w_half, fin.half_height)
    return [(fin.center + side * w_mid * fin.width_axis, axes, ext)
            for side in (-1.0, 1.0)]


class Renderer:
    """Caches the static scene (rays, surface hits, fin occlusion, reference
    shading) so repeated ball presses only re-render the touched pixels."""

    def __init__(self, geom: SensorGeometry, camera, pose: CameraPose,
                 rig: LedRig | None = None, shading: ShadingParams | None = None):
        self.geom = geom
        self.camera = camera
        self.pose = pose
        self.rig = rig
        self.shading = shading
        h, w = camera.height, camera.width
        self.shape = (h, w)

        v, u = np.mgrid[0:h, 0:w].astype(np.float64)
        pix = np.stack([u.ravel(), v.ravel()], axis=-1)
        rays_cam = unproject(camera, pix)
        self.dirs = rays_cam @ pose.rotation  # R^T applied row-wise
        self.origin = pose.center

        self._march()
        self._occlusion()
        self._reference()

    def _march(self):
        """Bracket f(t) = rho(t) - r(z(t)) over the ray's crossing of the body's
        z slab, then bisect. The camera must start inside the cross-section
        (or outside the slab entirely, entering through the base plane)."""
        geom, origin, dirs = self.geom, self.origin, self.dirs
        n = len(dirs)
        dz = dirs[:, 2]
        horiz = np.abs(dz) < 1e-12
        safe_dz = np.where(horiz, 1.0, dz)
        ta = (0.0 - origin[2]) / safe_dz
        tb = (geom.height - origin[2]) / safe_dz
        t_cap = float(np.linalg.norm(origin) + geom.height + 3.0 * geom.max_radius)
        in_slab = (0.0 < origin[2]) & (origin[2] < geom.height)
        t0 = np.where(horiz, 0.0, np.maximum(np.minimum(ta, tb), 0.0))
        t1 = np.where(horiz, t_cap, np.minimum(np.maximum(ta, tb), t_cap))
        live = np.where(horiz, np.full(n, in_slab), t1 > t0)

        def f_at(t):
            x = origin[0] + t * dirs[:, 0]
            y = origin[1] + t * dirs[:, 1]
            z = np.clip(origin[2] + t * dz, 0.0, geom.height)
            return np.hypot(x, y) - geom.radius(z)

        span = t1 - t0
        f_prev = f_at(t0)
        t_lo = np.zeros(n)
        t_hi = np.zeros(n)
        found = np.zeros(n, dtype=bool)
        inside0 = live & (f_prev < 0)
        for i in range(1, _MARCH_STEPS + 1):
            tc = t0 + span * (i / _MARCH_STEPS)
            f_cur = f_at(tc)
            cross = inside0 & ~found & (f_cur >= 0)
            tp = t0 + span * ((i - 1) / _MARCH_STEPS)
            t_lo[cross] = tp[cross]
            t_hi[cross] = tc[cross]
            found |= cross
            f_prev = f_cur
        for _ in range(_BISECT_STEPS):
            mid = 0.5 * (t_lo + t_hi)
            neg = f_at(mid) < 0
            t_lo = np.where(found & neg, mid, t_lo)
            t_hi = np.where(found & ~neg, mid, t_hi)
        t_hit = 0.5 * (t_lo + t_hi)
        self.valid = found
        self.t_surf = np.where(found, t_hit, np.inf)
        pts = origin + np.where(found, t_hit, 0.0)[:, None] * dirs
        pts[~found] = 0.0
        self.hit_points = pts
        z_hit = np.clip(pts[:, 2], 0.0, geom.height)
        phi = np.arctan2(pts[:, 1], pts[:, 0])
        n_out = surface_normals(self.geom, z_hit, phi)
        self.hit_normals = np.where(found[:, None], -n_out, 0.0)

    def _segment_occluded(self, t_end):
        """Does [0, t_end] along each ray cross a fin slab before the surface?"""
        if self.rig is None or self.rig.fin_thickness == 0.0:
            return np.zeros(len(self.dirs), dtype=bool)
        occ = np.zeros(len(self.dirs), dtype=bool)
        for fin in (self.rig.red, self.rig.green):
            for center, axes, extents in _fin_boxes(fin, self.rig.fin_thickness):
                lo, hi = _box_interval(center, axes, extents, self.origin, self.dirs)
                lo = np.maximum(lo, 1e-9)
                occ |= lo < np.minimum(hi, t_end - 1e-9)
        return occ

    def _occlusion(self):
        self.occluded = self._segment_occluded(self.t_surf) & self.valid

    def _shade(self, points, normals, chunk=16384):
        """Phong shading of interior-facing surface points; returns (n, 3)."""
        rig, sh = self.rig, self.shading
        if rig is None or sh is None:
            raise ValueError("renderer needs a rig and shading parameters to shade")
        n_pts = len(points)
        out = np.empty((n_pts, 3))
        channels = (
            (rig.red.positions, rig.red.directions, rig.intensities[0]),
            (rig.green.positions, rig.green.directions, rig.intensities[1]),
            (rig.blue_positions, rig.blue_directions, rig.intensities[2]),
        )
        for start in range(0, n_pts, chunk):
            pts = points[start : start + chunk]
            nrm = normals[start : start + chunk]
            view = self.origin - pts
            view /= np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-300)
            for ci, (epos, edir, inten) in enumerate(channels):
                if len(epos) == 0 or inten == 0.0:
                    out[start : start + chunk, ci] = sh.ambient
                    continue
                w = pts[None, :, :] - epos[:, None, :]
                dist = np.linalg.norm(w, axis=2)
                dist = np.maximum(dist, 1e-9)
                omega = w / dist[:, :, None]
                emit_cos = np.maximum(0.0, np.einsum("epk,ek->ep", omega, edir))
                ndotl = np.maximum(0.0, -np.einsum("epk,pk->ep", omega, nrm))
                # mirror of the light direction about the normal
                refl = 2.0 * ndotl[:, :, None] * nrm[None, :, :] + omega
                spec = np.maximum(0.0, np.einsum("epk,pk->ep", refl, view))
                spec = np.where(ndotl > 0.0, spec**sh.p, 0.0)
                att = 1.0 / (dist * dist) if sh.inverse_square else np.ones_like(dist)
                contrib = emit_cos * att * (sh.kd * ndotl + sh.ks * spec)
                out[start : start + chunk, ci] = sh.ambient + (inten / len(epos)) * contrib.sum(axis=0)
        return np.clip(out, 0.0, 1.0)

    def _reference(self):
        if self.rig is None or self.shading is None:
            self.reference_flat = None
            return
        shade = np.zeros((len(self.dirs), 3))
        idx = np.flatnonzero(self.valid & ~self.occluded)
        shade[idx] = self._shade(self.hit_points[idx], self.hit_normals[idx])
        shade[self.occluded] = 0.5
        self.reference_flat = shade

    def _ball_hits(self, balls):
        """First deformed-surface hit per ray: min over each ball's sphere entry."""
        t_def = self.t_surf.copy()
        which = np.full(len(self.dirs), -1)
        for bi, ball in enumerate(balls):
            oc = self.origin - ball.center
            b = self.dirs @ oc
            c = float(oc @ oc) - ball.radius**2
            disc = b * b - c
            hit = disc > 0
            t_in = -b - np.sqrt(np.where(hit, disc, 0.0))
            ok = self.valid & hit & (t_in > 1e-9) & (t_in < t_def)
            t_def = np.where(ok, t_in, t_def)
            which = np.where(ok, bi, which)
        return t_def, which

    def render(self, balls=None) -> TactileImage:
        if self.reference_flat is None:
            raise ValueError("renderer needs a rig and shading parameters to render")
        h, w = self.shape
        if balls is None:
            return TactileImage(values=self.reference_flat.reshape(h, w, 3).copy())
        if isinstance(balls, ProbeBall):
            balls = [balls]
        t_def, which = self._ball_hits(balls)
        img = self.reference_flat.copy()
        touched = np.flatnonzero(which >= 0)
        if touched.size:
            pts = self.origin + t_def[touched, None] * self.dirs[touched]
            nrm = np.empty((touched.size, 3))
            for bi, ball in enumerate(balls):
                sel = which[touched] == bi
                if np.any(sel):
                    nrm[sel] = (pts[sel] - ball.center) / ball.radius
            shade = self._shade(pts, nrm)
            img[touched] = shade
            occ = self._segment_occluded(t_def)
            occ_t = occ[touched]
            img[touched[occ_t]] = 0.5
        return TactileImage(values=img.reshape(h, w, 3))

    def ground_truth(self, balls=None) -> GroundTruth:
        h, w = self.shape
        valid = self.valid.reshape(h, w)
        occl = self.occluded.reshape(h, w)
        if balls is None:
            depth = np.zeros((h, w))
        else:
            if isinstance(balls, ProbeBall):
                balls = [balls]
            t_def, which = self._ball_hits(balls)
            depth = np.zeros(h * w)
            hit = (which >= 0) & self.valid
            depth[hit] = self.t_surf[hit] - t_def[hit]
            depth = depth.reshape(h, w)
        contact = (depth > CONTACT_EPSILON) & valid
        grads = _central_gradients(depth, valid)
        return GroundTruth(depth_map=depth, gradient_field=grads,
                           contact_mask=contact, occlusion_mask=occl, valid_mask=valid)


# --- one-shot wrappers -------------------------------------------------------------


def render(geom, rig, shading, camera, pose, ball=None) -> TactileImage:
    return Renderer(geom, camera, pose, rig=rig, shading=shading).render(ball)


def render_ground_truth(geom, camera, pose, ball=None, rig=None) -> GroundTruth:
    return Renderer(geom, camera, pose, rig=rig).ground_truth(ball)


def occlusion_fraction(geom, rig, camera, pose) -> float:
    r = Renderer(geom, camera, pose, rig=rig)
    n_valid = int(np.count_nonzero(r.valid))
    if n_valid == 0:
        return 0.0
    return float(np.count_nonzero(r.occluded & r.valid)) / n_valid


def channel_directionality(geom, rig, camera, pose, band, shading=None,
                           n_presses=12, press_depth=1.0, ball_radius=2.0, seed=11):
    """Mean per-channel difference-image energy for ball presses inside a
    height band (z_lo, z_hi). Quantifies which colors reach which heights."""
    shading = shading if shading is not None else ShadingParams()
    z_lo, z_hi = band
    if not 0.0 <= z_lo < z_hi <= geom.height:
        raise ValueError("band must be a nonempty interval inside [0, height]")
    # sample inside the band directly so narrow bands (cone tips) still get presses
    rng = np.random.default_rng(seed)
    zs = rng.uniform(z_lo, z_hi, n_presses)
    phis = rng.uniform(-np.pi, np.pi, n_presses)
    pos = surface_positions(geom, zs, phis)
    nrm = surface_normals(geom, zs, phis)
    keep = [SurfacePoint(position=pos[i], outward_normal=nrm[i], z=float(zs[i]),
                         phi=float(phis[i])) for i in range(n_presses)]
    r = Renderer(geom, camera, pose, rig=rig, shading=shading)
    ref = r.render().values
    energy = np.zeros(3)
    for p in keep:
        center = p.position + (ball_radius - press_depth) * p.outward_normal
        img = r.render(ProbeBall(center=center, radius=ball_radius)).values
        diff = img - ref
        energy += np.abs(diff).sum(axis=(0, 1))
    return energy / len(keep)


# --- standard scene parts ------------------------------------------------------------


def _fin_emitters(center, normal, width_axis, up_axis, half_width, half_height,
                  thickness, per_face, inner_margin=0.0):
    side = max(1, int(round(math.sqrt(per_face))))
    if inner_margin > 0.0:
        # emitters sit on the two wings, mirror-symmetric about the cutout
        ncol = max(1, side // 2)
        wing = inner_margin + (half_width - inner_margin) * np.linspace(0.2, 0.8, ncol)
        a = np.concatenate([-wing[::-1], wing])
    else:
        a = np.linspace(-0.8 * half_width, 0.8 * half_width, side)
    b = np.linspace(-0.8 * half_height, 0.8 * half_height, side)
    aa, bb = np.meshgrid(a, b)
    grid = aa.ravel()[:, None] * width_axis + bb.ravel()[:, None] * up_axis
    plus = center + grid + (thickness / 2.0) * normal
    minus = center + grid - (thickness / 2.0) * normal
    positions = np.vstack([plus, minus])
    directions = np.vstack([np.tile(normal, (len(grid), 1)), np.tile(-normal, (len(grid), 1))])
    return positions, directions


def standard_rig(geom: SensorGeometry, intensities=(225.0, 225.0, 255.0),
                 fin_thickness: float = 0.7, emitters_per_face: int = 16,
                 ring_count: int = 24, fin_top: float | None = None) -> LedRig:
    """The cross-fin rig sized to fit inside the body's inner shell."""
    # boards span the lower two thirds; the tip is lit only obliquely from below
    z_hi = (2.0 / 3.0) * geom.height if fin_top is None else float(fin_top)
    if not 0.0 < z_hi < geom.height:
        raise ValueError("fin_top must lie inside the body height")
    zs = np.linspace(0.0, z_hi, 257)
    inner = geom.radius(zs) - geom.gel_thickness
    half_width = 0.95 * float(np.min(inner))
    if half_width <= 0:
        raise ValueError("body too thin for an internal fin")
    half_height = z_hi / 2.0
    # wings clear the camera's optical path through the base
    margin = min(1.5, 0.4 * half_width)
    ex = np.array([1.0, 0.0, 0.0])
    ey = np.array([0.0, 1.0, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    red_center = np.array([0.0, 0.0, half_height])
    rp, rd = _fin_emitters(red_center, ey, ex, ez, half_width, half_height,
                           fin_thickness, emitters_per_face, margin)
    gp, gd = _fin_emitters(red_center, ex, ey, ez, half_width, half_height,
                           fin_thickness, emitters_per_face, margin)
    red = LedFin(center=red_center, normal=ey, width_axis=ex, up_axis=ez,
                 half_width=half_width, half_height=half_height,
                 positions=rp, directions=rd, inner_margin=margin)
    green = LedFin(center=red_center, normal=ex, width_axis=ey, up_axis=ez,
                   half_width=half_width, half_height=half_height,
                   positions=gp, directions=gd, inner_margin=margin)
    ring_r = 0.75 * float(inner[0])
    ang = 2.0 * np.pi * np.arange(ring_count) / ring_count
    blue_pos = np.stack([ring_r * np.cos(ang), ring_r * np.sin(ang),
                         np.full(ring_count, 0.3)], axis=-1)
    blue_dir = np.tile(ez, (ring_count, 1))
    return LedRig(red=red, green=green, blue_positions=blue_pos, blue_directions=blue_dir,
                  fin_thickness=fin_thickness, intensities=intensities)


def standard_camera(width: int = 320, height: int = 320):
    from .optics import FisheyeCamera

    return FisheyeCamera(fx=126.0, fy=126.0, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                         k=(0.03, -0.002, 0.0, 0.0), width=width, height=height)


def undistortion_target(width: int = 320, height: int = 320):
    from .optics import PinholeCamera

    # f trades rim coverage for center resolution; 90 px keeps the wall above
    # z ~ 1.6 mm in frame while the stretched base annulus stays out
    return PinholeCamera(fx=90.0, fy=90.0, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                         width=width, height=height)


def standard_pose(standoff: float = 4.0) -> CameraPose:
    """Camera on the axis below the base, looking up the +z axis."""
    return CameraPose(rotation=np.eye(3), translation=np.array([0.0, 0.0, standoff]))
