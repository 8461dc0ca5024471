"""Camera models: equidistant fisheye, pinhole, and pose recovery.

The fisheye model maps a ray at angle theta from the optical axis to image
radius r = f * theta_d(theta) with theta_d = theta * (1 + k1 theta^2 +
k2 theta^4 + k3 theta^6 + k4 theta^8).  Unprojection inverts the polynomial
with Newton iteration.  A pinhole camera (r = f * tan(theta)) is available as
an undistortion target and as the lattice for ground-truth rasters.

Pose convention: x_cam = R @ x_world + t.

All projection routines are vectorized over leading axes; points are rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .formats import read_json, write_json

_THETA_MAX = math.radians(89.0)


def _skew(v):
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotvec_to_matrix(rvec) -> np.ndarray:
    """Rodrigues formula; exact series for tiny angles."""
    r = np.asarray(rvec, dtype=np.float64)
    th = float(np.linalg.norm(r))
    K = _skew(r)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    K = K / th
    return np.eye(3) + math.sin(th) * K + (1.0 - math.cos(th)) * (K @ K)


def matrix_to_rotvec(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos_th = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    th = math.acos(cos_th)
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if th < 1e-8:
        return vee
    if th > math.pi - 1e-4:
        # sin(th) ~ 0: recover the axis from R + I, whose columns align with it
        B = R + np.eye(3)
        col = B[:, int(np.argmax(np.diag(B)))]
        axis = col / np.linalg.norm(col)
        if np.dot(axis, vee) < 0:
            axis = -axis
        return th * axis
    return (th / math.sin(th)) * vee


@dataclass(frozen=True)
class FisheyeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    k: tuple
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        k = tuple(float(v) for v in self.k)
        if len(k) != 4:
            raise ValueError("k must hold 4 coefficients")
        object.__setattr__(self, "k", k)

    def theta_d(self, theta):
        t2 = theta * theta
        k1, k2, k3, k4 = self.k
        return theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))

    def theta_d_deriv(self, theta):
        t2 = theta * theta
        k1, k2, k3, k4 = self.k
        return 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def transform(self, world_points) -> np.ndarray:
        pts = np.asarray(world_points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Correspondence:
    world: np.ndarray
    pixel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "world", np.asarray(self.world, dtype=np.float64).reshape(3))
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=np.float64).reshape(2))


def _pix_from_dirs(camera, dirs):
    """Project camera-frame direction vectors; returns (u, v, theta), no bounds checks."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(rho, z)
    if isinstance(camera, FisheyeCamera):
        td = camera.theta_d(theta)
        scale = np.where(rho > 0, td / np.where(rho > 0, rho, 1.0), 0.0)
    else:
        # pinhole: r = f tan(theta), i.e. divide by z
        scale = np.where(rho > 0, np.abs(np.tan(theta)) / np.where(rho > 0, rho, 1.0), 0.0)
    u = camera.cx + camera.fx * scale * x
    v = camera.cy + camera.fy * scale * y
    return u, v, theta


def project(camera, pose: CameraPose, world_points) -> np.ndarray:
    """World points -> pixels. Raises if any point is behind the camera or at
    incidence >= 89 degrees (fisheye) / non-positive depth (pinhole)."""
    pts = np.asarray(world_points, dtype=np.float64)
    single = pts.ndim == 1
    cam = pose.transform(np.atleast_2d(pts))
    u, v, theta = _pix_from_dirs(camera, cam)
    if isinstance(camera, FisheyeCamera):
        if np.any(theta >= _THETA_MAX):
            raise ValueError("point behind camera or incidence angle >= 89 deg")
    else:
        if np.any(cam[:, 2] <= 0):
            raise ValueError("point behind pinhole camera")
    pix = np.stack([u, v], axis=-1)
    return pix[0] if single else pix


def unproject(camera, pixels) -> np.ndarray:
    """Pixels -> unit rays in the camera frame.

    Fisheye inverts theta_d by Newton iteration (<= 50 steps, residual
    < 1e-12); raises if any pixel fails to converge.
    """
    pix = np.asarray(pixels, dtype=np.float64)
    single = pix.ndim == 1
    p = np.atleast_2d(pix)
    dx = (p[:, 0] - camera.cx) / camera.fx
    dy = (p[:, 1] - camera.cy) / camera.fy
    r = np.hypot(dx, dy)
    if isinstance(camera, PinholeCamera):
        rays = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
        rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
        return rays[0] if single else rays
    theta = r.copy()
    converged = False
    for _ in range(50):
        res = camera.theta_d(theta) - r
        if np.max(np.abs(res)) < 1e-12:
            converged = True
            break
        theta = theta - res / camera.theta_d_deriv(theta)
    if not converged and np.max(np.abs(camera.theta_d(theta) - r)) >= 1e-12:
        raise ValueError("theta_d inversion did not converge; distortion outside valid regime")
    if np.any(theta < 0) or np.any(theta > np.pi):
        raise ValueError("theta_d inversion left the physical regime [0, pi]")
    sin_t = np.sin(theta)
    safe_r = np.where(r > 0, r, 1.0)
    rays = np.stack(
        [
            np.where(r > 0, sin_t * dx / safe_r, 0.0),
            np.where(r > 0, sin_t * dy / safe_r, 0.0),
            np.cos(theta),
        ],
        axis=-1,
    )
    return rays[0] if single else rays


# --- undistortion ---------------------------------------------------------------


@dataclass(frozen=True)
class Remap:
    """Precomputed target-pixel -> source-pixel map for bilinear resampling."""

    source_x: np.ndarray
    source_y: np.ndarray
    inside: np.ndarray


def build_remap(camera, target) -> Remap:
    """Map every target pixel through the shared camera center: target ray ->
    source pixel. Works for any source/target model pair."""
    v, u = np.mgrid[0 : target.height, 0 : target.width].astype(np.float64)
    pix = np.stack([u.ravel(), v.ravel()], axis=-1)
    rays = unproject(target, pix)
    su, sv, theta = _pix_from_dirs(camera, rays)
    su = su.reshape(u.shape)
    sv = sv.reshape(u.shape)
    # snap float fuzz so an identity mapping samples exactly on the lattice
    su = np.where(np.abs(su - np.rint(su)) < 1e-6, np.rint(su), su)
    sv = np.where(np.abs(sv - np.rint(sv)) < 1e-6, np.rint(sv), sv)
    inside = (
        (su >= 0)
        & (su <= camera.width - 1)
        & (sv >= 0)
        & (sv <= camera.height - 1)
        & (theta.reshape(u.shape) < _THETA_MAX)
    )
    return Remap(source_x=su, source_y=sv, inside=inside)


def bilinear_sample(image, sx, sy, inside=None) -> np.ndarray:
    """Bilinear lookup of image at float coordinates; outside samples are 0."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if inside is None:
        inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x = np.clip(sx, 0, w - 1)
    y = np.clip(sy, 0, h - 1)
    x0 = np.clip(np.floor(x).astype(np.intp), 0, w - 2) if w > 1 else np.zeros_like(x, np.intp)
    y0 = np.clip(np.floor(y).astype(np.intp), 0, h - 2) if h > 1 else np.zeros_like(y, np.intp)
    tx = x - x0
    ty = y - y0
    if img.ndim == 3:
        tx = tx[..., None]
        ty = ty[..., None]
    out = (1.0 - ty) * ((1.0 - tx) * img[y0, x0] + tx * img[y0, x0 + 1]) + ty * (
        (1.0 - tx) * img[y0 + 1, x0] + tx * img[y0 + 1, x0 + 1]
    )
    if img.ndim == 3:
        out[~inside] = 0.0
    else:
        out = np.where(inside, out, 0.0)
    return out


def undistort_image(camera, image, target) -> np.ndarray:
    """Resample a source-camera image onto the target camera's pixel lattice."""
    remap = build_remap(camera, target)
    return bilinear_sample(image, remap.source_x, remap.source_y, remap.inside)


# --- Levenberg-Marquardt ----------------------------------------------------------


def _numeric_jacobian(fun, x, r0):
    J = np.empty((r0.size, x.size))
    for j in range(x.size):
        h = 1e-6 * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return J


def _levenberg_marquardt(fun, x0, max_iters=200, step_tol=1e-10, history=None):
    """Damped Gauss-Newton with lam * diag(JtJ) damping; central differences.

    lam starts at 1e-3, x10 on reject, /10 on accept. Returns the parameter
    vector; if history is a list, the RMS after each accepted step (and the
    initial RMS) is appended.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    r = fun(x)
    cost = float(r @ r)
    lam = 1e-3
    if history is not None:
        history.append(math.sqrt(cost / r.size))
    for _ in range(max_iters):
        J = _numeric_jacobian(fun, x, r)
        A = J.T @ J
        g = J.T @ r
        diag = np.maximum(np.diag(A), 1e-12)
        accepted = False
        while lam <= 1e12:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if np.linalg.norm(step) < step_tol:
                return x
            xn = x + step
            rn = fun(xn)
            cn = float(rn @ rn)
            if cn <= cost:
                x, r, cost = xn, rn, cn
                lam = max(lam / 10.0, 1e-15)
                if history is not None:
                    history.append(math.sqrt(cost / r.size))
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            return x
    return x


def refine_intrinsics(correspondences, initial_camera: FisheyeCamera, fixed_pose: CameraPose,
                      history=None) -> FisheyeCamera:
    """Levenberg-Marquardt over (fx, fy, cx, cy, k1..k4) at a fixed pose.

    Needs >= 12 correspondences spanning >= 60 degrees of field of view.
    """
    corrs = list(correspondences)
    if len(corrs) < 12:
        raise ValueError("need at least 12 correspondences")
    world = np.array([c.world for c in corrs])
    obs = np.array([c.pixel for c in corrs])
    cam_pts = fixed_pose.transform(world)
    theta = np.arctan2(np.hypot(cam_pts[:, 0], cam_pts[:, 1]), cam_pts[:, 2])
    if np.any(theta >= _THETA_MAX):
        raise ValueError("correspondence behind camera or at incidence >= 89 deg")
    if 2.0 * float(np.max(theta)) < math.radians(60.0):
        raise ValueError("correspondences span less than 60 deg of field of view")

    base = initial_camera
    rho = np.hypot(cam_pts[:, 0], cam_pts[:, 1])
    safe = np.where(rho > 0, rho, 1.0)
    cpsi = np.where(rho > 0, cam_pts[:, 0] / safe, 0.0)
    spsi = np.where(rho > 0, cam_pts[:, 1] / safe, 0.0)
    t2 = theta * theta

    def residual(p):
        td = theta * (1.0 + t2 * (p[4] + t2 * (p[5] + t2 * (p[6] + t2 * p[7]))))
        return np.concatenate(
            [p[0] * td * cpsi + p[2] - obs[:, 0], p[1] * td * spsi + p[3] - obs[:, 1]]
        )

    x0 = np.array([base.fx, base.fy, base.cx, base.cy, *base.k], dtype=np.float64)
    J0 = _numeric_jacobian(residual, x0, residual(x0))
    norms = np.linalg.norm(J0, axis=0)
    if np.any(norms < 1e-12):
        raise ValueError("ill-conditioned normal equations: degenerate correspondence geometry")
    sv = np.linalg.svd(J0 / norms, compute_uv=False)
    if sv[-1] < 1e-12 * sv[0]:
        raise ValueError("ill-conditioned normal equations: degenerate correspondence geometry")
    x = _levenberg_marquardt(residual, x0, history=history)
    return FisheyeCamera(fx=float(x[0]), fy=float(x[1]), cx=float(x[2]), cy=float(x[3]),
                         k=tuple(float(v) for v in x[4:8]),
                         width=base.width, height=base.height)


# --- pose estimation ---------------------------------------------------------------


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    inlier_threshold: float = 1.0
    seed: int = 0


def _kabsch(src, dst):
    """Rigid transform (R, t) minimizing ||R src + t - dst||."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    H = (src - sc).T @ (dst - dc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, dc - R @ sc

def _resect_rays(rays, world):
    """Pose from unit rays and world points: alternate a Kabsch alignment with
    depth re-estimation along each ray (orthogonal iteration)."""
    s = np.ones(len(rays))
    for _ in range(200):
        R, t = _kabsch(world, s[:, None] * rays)
        proj = world @ R.T + t
        s_new = np.maximum(np.einsum("ij,ij->i", proj, rays), 1e-9)
        if np.max(np.abs(s_new - s)) < 1e-12 * max(1.0, float(np.max(s_new))):
            s = s_new
            break
        s = s_new
    return _kabsch(world, s[:, None] * rays)


def _reprojection_errors(camera, R, t, world, obs):
    cam_pts = world @ R.T + t
    u, v, theta = _pix_from_dirs(camera, cam_pts)
    err = np.hypot(u - obs[:, 0], v - obs[:, 1])
    return np.where(theta < _THETA_MAX, err, np.inf)


def estimate_pose_pnp(camera, correspondences, cfg: RansacConfig = RansacConfig()):
    """RANSAC PnP: 4-point hypotheses by ray resection, consensus by
    reprojection error, Levenberg-Marquardt refinement on the inliers.

    Returns (CameraPose, inlier index array). Deterministic for a fixed seed;
    consensus ties break toward lower inlier RMS. Stops early once the usual
    1 - (1 - w^4)^N confidence bound passes 0.9999 (floor of 100 iterations).
    """
    corrs = list(correspondences)
    n = len(corrs)
    if n < 4:
        raise ValueError("need at least 4 correspondences")
    world = np.array([c.world for c in corrs])
    obs = np.array([c.pixel for c in corrs])
    if np.any(obs[:, 0] < 0) or np.any(obs[:, 0] >= camera.width) or \
       np.any(obs[:, 1] < 0) or np.any(obs[:, 1] >= camera.height):
        raise ValueError("correspondence pixel outside image bounds")
    rays = unproject(camera, obs)

    rng = np.random.default_rng(cfg.seed)
    best_count = 0
    best_rms = np.inf
    best_pose = None
    any_sample_ok = False
    needed = cfg.iterations
    i = 0
    while i < min(cfg.iterations, max(100, needed)):
        i += 1
        idx = rng.choice(n, size=4, replace=False)
        sample_w = world[idx]
        svals = np.linalg.svd(sample_w - sample_w.mean(axis=0), compute_uv=False)
        if svals[0] < 1e-9 or svals[2] < 1e-9 * svals[0]:
            continue  # coplanar or collapsed sample
        any_sample_ok = True
        R, t = _resect_rays(rays[idx], sample_w)
        err = _reprojection_errors(camera, R, t, world, obs)
        inl = err < cfg.inlier_threshold
        count = int(np.count_nonzero(inl))
        if count >= 4:
            rms = float(np.sqrt(np.mean(err[inl] ** 2)))
            if count > best_count or (count == best_count and rms < best_rms):
                best_count, best_rms, best_pose = count, rms, (R, t, inl)
                w4 = (count / n) ** 4
                if w4 >= 1.0:
                    needed = 0
                else:
                    needed = math.ceil(math.log(1e-4) / math.log(1.0 - w4))
    if best_pose is None:
        if not any_sample_ok:
            raise ValueError("degenerate correspondences: every minimal sample collapsed")
        raise ValueError("fewer than 4 inliers found")

    R0, t0, inl = best_pose
    in_world = world[inl]
    in_obs = obs[inl]

    def residual(x):
        R = rotvec_to_matrix(x[:3])
        cam_pts = in_world @ R.T + x[3:]
        u, v, theta = _pix_from_dirs(camera, cam_pts)
        bad = theta >= _THETA_MAX
        ru = np.where(bad, 1e6, u - in_obs[:, 0])
        rv = np.where(bad, 1e6, v - in_obs[:, 1])
        return np.concatenate([ru, rv])

    x0 = np.concatenate([matrix_to_rotvec(R0), t0])
    x = _levenberg_marquardt(residual, x0)
    pose = CameraPose(rotation=rotvec_to_matrix(x[:3]), translation=x[3:])
    err = _reprojection_errors(camera, pose.rotation, pose.translation, world, obs)
    inliers = np.flatnonzero(err < cfg.inlier_threshold)
    if inliers.size < 4:
        raise ValueError("fewer than 4 inliers found")
    return pose, inliers


# --- persistence ---------------------------------------------------------------


def save_camera(path, camera, pose: CameraPose | None = None) -> None:
    if isinstance(camera, FisheyeCamera):
        model = "fisheye"
        k = list(camera.k)
    else:
        model = "pinhole"
        k = [0.0, 0.0, 0.0, 0.0]
    data = {
        "model": model,
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "k": k,
        "width": camera.width,
        "height": camera.height,
    }
    if pose is not None:
        data["R"] = [float(v) for v in pose.rotation.ravel()]
        data["t"] = [float(v) for v in pose.translation]
    write_json(path, data)


def load_camera(path):
    data = read_json(path)
    model = data.get("model", "fisheye")
    if model == "pinhole":
        cam = PinholeCamera(fx=data["fx"], fy=data["fy"], cx=data["cx"], cy=data["cy"],
                            width=data["width"], height=data["height"])
    else:
        cam = FisheyeCamera(fx=data["fx"], fy=data["fy"], cx=data["cx"], cy=data["cy"],
                            k=tuple(data["k"]), width=data["width"], height=data["height"])
    pose = None
    if "R" in data:
        pose = CameraPose(rotation=np.array(data["R"]).reshape(3, 3),
                          translation=np.array(data["t"]))
    return cam, pose
