"""Virtual probing, minimum-point pose correspondences, and dataset assembly.

A planned grid of sphere presses is rendered through the fisheye camera,
undistorted onto the pinhole target lattice, and paired with exact ground
truth ray-cast directly on that lattice (same camera center, so the two views
agree pixel for pixel). Dataset rows map pixel location and color difference
to depth gradients for the lookup model.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .geometry import ProbeBall, SensorGeometry, SurfacePoint
from .optics import (
    CameraPose,
    Correspondence,
    FisheyeCamera,
    PinholeCamera,
    RansacConfig,
    bilinear_sample,
    build_remap,
    estimate_pose_pnp,
)
from .simulator import (
    GroundTruth,
    Renderer,
    ShadingParams,
    TactileImage,
    standard_rig,
    undistortion_target,
)

log = logging.getLogger(__name__)

CSV_HEADER = "u,v,r,g,b,gx,gy,contact"
_COLUMNS = tuple(CSV_HEADER.split(","))

# gel thickness of the reference build; probing deeper than the gel can
# physically indent gets a warning, not an error
GEL_DEPTH_WARN = 1.75


@dataclass(frozen=True)
class ProbeSample:
    """One virtual CNC press: undistorted images plus exact ground truth.

    The planned point, press normal, and ball size are carried along so the
    minimum-point correspondence and the dataset manifest can be rebuilt from
    the sample alone.
    """

    probe_index: int
    ball_center: np.ndarray
    raw_image: TactileImage
    reference_image: TactileImage
    ground_truth: GroundTruth
    planned_point: np.ndarray
    planned_normal: np.ndarray
    ball_radius: float
    indent_depth: float

    def __post_init__(self):
        for name in ("ball_center", "planned_point", "planned_normal"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        # the sphere tip must sit at the depth offset of the planned point
        tip = self.planned_point - self.indent_depth * self.planned_normal
        expect = tip + self.ball_radius * self.planned_normal
        if np.max(np.abs(self.ball_center - expect)) > 1e-9:
            raise ValueError("ball_center is not the planned press position")


@dataclass(frozen=True)
class CalibDataset:
    """Rows of (u, v, r, g, b, gx, gy, contact) plus provenance metadata."""

    rows: np.ndarray
    geometry_hash: str
    camera_hash: str
    seed: int
    balance_fraction: float
    excluded_probes: int = 0

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=np.float64)
        if r.ndim != 2 or r.shape[1] != len(_COLUMNS):
            raise ValueError(f"rows must be (n, {len(_COLUMNS)})")
        contact = r[:, 7]
        if not np.all((contact == 0.0) | (contact == 1.0)):
            raise ValueError("contact column must be binary")
        noncontact = contact == 0.0
        if np.any(r[noncontact, 5:7] != 0.0):
            raise ValueError("non-contact rows must have zero gradients")
        r.setflags(write=False)
        object.__setattr__(self, "rows", r)

    @property
    def noncontact_fraction(self) -> float:
        return float((self.rows[:, 7] == 0.0).mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_COLUMNS)
        for row in self.rows:
            w.writerow([repr(int(row[0])), repr(int(row[1])),
                        repr(float(row[2])), repr(float(row[3])), repr(float(row[4])),
                        repr(float(row[5])), repr(float(row[6])), repr(int(row[7]))])
        return buf.getvalue()

    def save(self, csv_path, manifest_path=None) -> None:
        with open(csv_path, "w", newline="") as fh:
            fh.write(self.to_csv())
        if manifest_path is not None:
            with open(manifest_path, "w") as fh:
                json.dump(self.manifest(), fh, indent=2, sort_keys=True)
                fh.write("\n")

    def manifest(self) -> dict:
        return {
            "geometry_hash": self.geometry_hash,
            "camera_hash": self.camera_hash,
            "seed": self.seed,
            "balance_fraction": self.balance_fraction,
            "excluded_probes": self.excluded_probes,
            "rows": int(len(self.rows)),
            "noncontact_fraction": round(self.noncontact_fraction, 6),
        }


def load_dataset_csv(path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64,
                          ndmin=2)
    except ValueError as e:
        # numpy already names the offending row and column; add the file
        raise ValueError(f"{path}: {e}") from e
    if data.shape[1] != len(_COLUMNS):
        raise ValueError(f"{path}: expected {len(_COLUMNS)} columns, "
                         f"got {data.shape[1]}")
    return data


def geometry_hash(geom: SensorGeometry) -> str:
    payload = json.dumps({
        "kind": geom.kind, "height": geom.height, "gel": geom.gel_thickness,
        "radius_mm": geom.radius_mm, "cylinder_height": geom.cylinder_height,
        "control_points": [list(map(float, p)) for p in geom.control_points],
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def camera_hash(camera) -> str:
    fields = {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
              "width": camera.width, "height": camera.height}
    if isinstance(camera, FisheyeCamera):
        fields["model"] = "fisheye"
        fields["k"] = list(camera.k)
    else:
        fields["model"] = "pinhole"
    payload = json.dumps(fields, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


# --- probing ----------------------------------------------------------------------


def iter_probing(geom: SensorGeometry, camera, pose: CameraPose, plan,
                 depth: float = 1.0, *, ball_radius: float = 2.0,
                 rig=None, shading: ShadingParams | None = None,
                 target_camera=None):
    """Generator form of run_probing: one ProbeSample at a time.

    Holding thousands of full-resolution samples at once does not fit in
    memory, so large calibration runs stream samples straight into dataset
    assembly and drop them. Exclusions are logged the same way.
    """
    if depth < 0:
        raise ValueError("indentation depth must be non-negative")
    if depth > GEL_DEPTH_WARN:
        warnings.warn(f"indentation depth {depth} mm exceeds the gel thickness "
                      f"({GEL_DEPTH_WARN} mm); the press is unphysical", stacklevel=2)
    target = target_camera if target_camera is not None else undistortion_target(
        width=camera.width, height=camera.height)
    remap = build_remap(camera, target)
    if rig is None:
        rig = standard_rig(geom)
    ren = Renderer(geom, camera, pose, rig=rig,
                   shading=shading if shading is not None else ShadingParams())
    # the truth renderer carries the rig so ground_truth's occlusion mask is
    # the fin shadow on the undistorted lattice; without it the dataset would
    # include fin pixels whose difference signal is flat gray minus flat gray
    truth = Renderer(geom, target, pose, rig=rig)

    def undistort(img: TactileImage) -> TactileImage:
        out = bilinear_sample(img.values, remap.source_x, remap.source_y, remap.inside)
        return TactileImage(values=out)

    reference = undistort(ren.render())
    excluded = 0
    for idx, sp in enumerate(plan):
        center = sp.position + (ball_radius - depth) * sp.outward_normal
        ball = ProbeBall(center=center, radius=ball_radius)
        gt = truth.ground_truth(ball)
        if not gt.contact_mask.any():
            excluded += 1
            continue
        raw = undistort(ren.render(ball))
        yield ProbeSample(
            probe_index=idx, ball_center=center, raw_image=raw,
            reference_image=reference, ground_truth=gt,
            planned_point=sp.position, planned_normal=sp.outward_normal,
            ball_radius=ball_radius, indent_depth=depth)
    if excluded:
        log.info("probing excluded %d of %d planned points (empty contact)",
                 excluded, len(plan))


def run_probing(geom: SensorGeometry, camera, pose: CameraPose, plan,
                depth: float = 1.0, *, ball_radius: float = 2.0,
                rig=None, shading: ShadingParams | None = None,
                target_camera=None) -> list[ProbeSample]:
    """Press a sphere at every planned point and collect undistorted samples.

    Probes whose contact mask comes out empty (grazing geometry, zero depth)
    are excluded; the count is logged and recoverable as len(plan) - len(result).
    """
    return list(iter_probing(geom, camera, pose, plan, depth,
                             ball_radius=ball_radius, rig=rig, shading=shading,
                             target_camera=target_camera))


def minimum_point(sample: ProbeSample) -> Correspondence:
    """The press's closest-approach correspondence: image argmax of depth vs
    the sphere tip along the press normal. Ties break to the lowest (v, u)."""
    depth = sample.ground_truth.depth_map
    if not sample.ground_truth.contact_mask.any():
        raise ValueError("empty contact mask")
    flat = np.argmax(depth)  # row-major argmax is exactly the (v, u) tie-break
    v, u = np.unravel_index(flat, depth.shape)
    world = sample.ball_center - sample.ball_radius * sample.planned_normal
    return Correspondence(world=world, pixel=np.array([float(u), float(v)]))


def pose_from_correspondences(corrs, camera, n: int = 100, seed: int = 0,
                              config: RansacConfig | None = None):
    """PnP over n randomly chosen correspondences from a precomputed list.

    Split out of pose_from_probes so a streaming calibration can harvest
    minimum points as samples fly past and discard the images.
    """
    if not corrs:
        raise ValueError("no probe samples")
    rng = np.random.default_rng(seed)
    take = min(n, len(corrs))
    chosen = rng.choice(len(corrs), size=take, replace=False)
    picked = [corrs[i] for i in sorted(chosen)]
    cfg = config if config is not None else RansacConfig(seed=seed)
    return estimate_pose_pnp(camera, picked, cfg)


def pose_from_probes(samples, camera, n: int = 100, seed: int = 0,
                     config: RansacConfig | None = None):
    """Recover the camera pose from minimum-point correspondences of n
    randomly chosen probes (the undistorted-lattice camera)."""
    corrs = [minimum_point(s) for s in samples]
    return pose_from_correspondences(corrs, camera, n=n, seed=seed,
                                     config=config)


# --- dataset assembly --------------------------------------------------------------


_DILATE3 = np.ones((3, 3), dtype=bool)


def build_dataset(samples, balance_fraction: float = 0.25, per_probe_cap: int = 400,
                  seed: int = 0, *, geom: SensorGeometry | None = None,
                  camera=None, excluded_probes: int = 0,
                  rim_erode: int = 0) -> CalibDataset:
    """Assemble the balanced pixel->gradient training table.

    Contact rows come from contact minus (dilated) occlusion; undistortion
    smears the gray fin value across one source pixel, so the exclusion zone
    is the occlusion mask dilated by 2. Non-contact rows are drawn outside a
    3 px dilation of the contact mask with zero gradient labels.

    rim_erode > 0 additionally erodes the contact mask before sampling,
    dropping the crease ring where central-difference labels are steepest.
    That lowers validation MSE a lot (the hard rows leave both splits), but
    reconstruction integrates those very gradients: eroding by 2 px roughly
    triples the peak-height error of reconstructed presses. Keep the default
    0 unless the model is used for something other than depth recovery.
    """
    if not 0.0 <= balance_fraction < 1.0:
        raise ValueError("balance_fraction must be in [0, 1)")
    if per_probe_cap <= 0:
        raise ValueError("per_probe_cap must be positive")
    if rim_erode < 0:
        raise ValueError("rim_erode must be non-negative")
    rows = []
    total_contact = 0
    for sample in samples:
        gt = sample.ground_truth
        diff = sample.raw_image.values - sample.reference_image.values
        occ_wide = scipy.ndimage.binary_dilation(gt.occlusion_mask, structure=_DILATE3,
                                                 iterations=2)
        inner = gt.contact_mask
        if rim_erode:
            inner = scipy.ndimage.binary_erosion(inner, structure=_DILATE3,
                                                 iterations=rim_erode)
        eligible = inner & ~occ_wide
        vs, us = np.nonzero(eligible)
        rng = np.random.default_rng((seed, sample.probe_index))
        if len(vs) > per_probe_cap:
            pick = rng.choice(len(vs), size=per_probe_cap, replace=False)
            pick.sort()
            vs, us = vs[pick], us[pick]
        total_contact += len(vs)
        g = gt.gradient_field
        for v, u in zip(vs, us):
            rows.append((u, v, diff[v, u, 0], diff[v, u, 1], diff[v, u, 2],
                         g[v, u, 0], g[v, u, 1], 1.0))
        if balance_fraction > 0.0 and len(vs):
            n_neg = int(round(len(vs) * balance_fraction / (1.0 - balance_fraction)))
            away = scipy.ndimage.binary_dilation(gt.contact_mask, structure=_DILATE3,
                                                 iterations=3)
            pool = gt.valid_mask & ~away & ~occ_wide
            pvs, pus = np.nonzero(pool)
            if len(pvs) == 0:
                continue
            pick = rng.choice(len(pvs), size=min(n_neg, len(pvs)), replace=False)
            pick.sort()
            for v, u in zip(pvs[pick], pus[pick]):
                rows.append((u, v, diff[v, u, 0], diff[v, u, 1], diff[v, u, 2],
                             0.0, 0.0, 0.0))
    if total_contact == 0:
        raise ValueError("no contact rows across all samples")
    arr = np.array(rows, dtype=np.float64)
    order = np.random.default_rng(seed).permutation(len(arr))
    geo_h = geometry_hash(geom) if geom is not None else ""
    cam_h = camera_hash(camera) if camera is not None else ""
    return CalibDataset(rows=arr[order], geometry_hash=geo_h, camera_hash=cam_h,
                        seed=seed, balance_fraction=balance_fraction,
                        excluded_probes=excluded_probes)
