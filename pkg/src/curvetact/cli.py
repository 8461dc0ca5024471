"""Batch front door: scene config, five subcommands, reproducible artifacts.

Precedence for settings, lowest to highest: built-in defaults, the
--config JSON file, the --profile preset, then explicit flags. Every
command writes a manifest embedding the fully resolved config and seed so
a run can be reproduced from its output directory alone; nothing written
here contains timestamps, and identical inputs produce byte-identical
files.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import os
import sys

import numpy as np

from . import __version__
from .calibration import (build_dataset, iter_probing, load_dataset_csv,
                          minimum_point, pose_from_correspondences)
from .formats import (ensure_dir, fmt_float, load_float_raw, load_pgm, load_ppm,
                      save_float_raw, save_pgm, save_ply, save_ppm, write_json)
from .geometry import make_geometry, sample_surface
from .gradnet import TrainConfig, load_model, save_model, train
from .optics import FisheyeCamera, build_remap, load_camera, undistort_image
from .pipeline import Reconstructor, evaluate, save_metrics, summarize
from .poisson import HeightMap
from .simulator import (ProbeBall, Renderer, ShadingParams, standard_camera,
                        standard_pose, standard_rig, undistortion_target)


class ConfigError(ValueError):
    """Bad key, bad value, or missing referenced file; maps to exit code 2."""


_DEFAULT_CONFIG = {
    "geometry": {"kind": "cylinder_hemisphere", "radius_mm": 10.0,
                 "cylinder_height": 15.0},
    "rig": {},
    "shading": {},
    "camera_file": None,
    "pose_standoff": 4.0,
    "probes": 100,
    "ball_radius": 2.0,
    "indent_depth": 1.0,
    "balance_fraction": 0.25,
    "rim_erode": 0,
    "training": {"learning_rate": 1e-3, "batch_size": 256, "epochs": 200,
                 "val_fraction": 0.1, "hidden_sizes": [64, 64],
                 "min_learning_rate": 1e-5},
    "seed": 0,
    "out": "out",
}

_PROFILES = {
    "smoke": {"probes": 100, "training": {"epochs": 300}},
    "desk": {"probes": 2000, "training": {"epochs": 400}},
}

_RIG_KEYS = {"intensities", "fin_top", "leds_per_fin_side", "ring_leds"}
_SHADING_KEYS = {"kd", "ks", "p", "ambient", "inverse_square"}
_GEOMETRY_KEYS = {"kind", "radius_mm", "cylinder_height", "height",
                  "control_points", "gel_thickness", "base_margin"}
_TRAINING_KEYS = {"learning_rate", "batch_size", "epochs", "seed",
                  "val_fraction", "hidden_sizes", "min_learning_rate"}


def _check_keys(section, given, allowed):
    for key in given:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown config key: {where}")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(args) -> dict:
    """Defaults -> config file -> profile -> flags, with key validation."""
    cfg = copy.deepcopy(_DEFAULT_CONFIG)
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigError(f"config: no such file '{args.config}'")
        from .formats import read_json
        try:
            loaded = read_json(args.config)
        except ValueError as e:
            raise ConfigError(f"config: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config: top level must be a JSON object")
        _check_keys("", loaded, set(_DEFAULT_CONFIG))
        geo = loaded.get("geometry")
        if isinstance(geo, dict) and "kind" in geo:
            # naming a kind redescribes the shape from scratch; merging would
            # leak the default cylinder's dimension keys into the new kind
            cfg["geometry"] = {}
        cfg = _merge(cfg, loaded)
    profile = getattr(args, "profile", None)
    if profile:
        cfg = _merge(cfg, _PROFILES[profile])
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["out"] = args.out
    if getattr(args, "probes", None) is not None:
        cfg["probes"] = args.probes

    _check_keys("geometry", cfg["geometry"], _GEOMETRY_KEYS)
    _check_keys("rig", cfg["rig"], _RIG_KEYS)
    _check_keys("shading", cfg["shading"], _SHADING_KEYS)
    _check_keys("training", cfg["training"], _TRAINING_KEYS)
    if cfg["camera_file"] is not None and not os.path.exists(cfg["camera_file"]):
        raise ConfigError(f"camera_file: no such file '{cfg['camera_file']}'")
    return cfg


class Scene:
    """Geometry, rig, shading, both cameras, and the mount pose of one run."""

    def __init__(self, cfg: dict):
        gspec = dict(cfg["geometry"])
        kind = gspec.pop("kind", None)
        if kind is None:
            raise ConfigError("geometry.kind is required")
        if "control_points" in gspec:
            gspec["control_points"] = [tuple(p) for p in gspec["control_points"]]
        try:
            self.geom = make_geometry(kind, **gspec)
        except (ValueError, KeyError) as e:
            raise ConfigError(f"geometry: {e}") from e
        try:
            rig_kwargs = dict(cfg["rig"])
            if "intensities" in rig_kwargs:
                rig_kwargs["intensities"] = tuple(rig_kwargs["intensities"])
            self.rig = standard_rig(self.geom, **rig_kwargs)
            self.shading = ShadingParams(**cfg["shading"])
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.pose = standard_pose(cfg["pose_standoff"])
        if cfg["camera_file"]:
            self.camera, pose = load_camera(cfg["camera_file"])
            if pose is not None:
                self.pose = pose
        else:
            self.camera = standard_camera()
        self.target = undistortion_target()

    def undistort(self, image):
        if isinstance(self.camera, FisheyeCamera):
            return undistort_image(self.camera, image, self.target)
        return np.asarray(getattr(image, "values", image), dtype=np.float64)


def _parse_ball(text: str) -> ProbeBall:
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError(f"--ball wants x,y,z,r, got '{text}'")
    try:
        x, y, z, r = (float(p) for p in parts)
        return ProbeBall(center=np.array([x, y, z]), radius=r)
    except ValueError as e:
        raise ConfigError(f"--ball '{text}': {e}") from e


def _manifest(out_dir, name, cfg, command, extra) -> None:
    doc = {"command": command, "version": __version__,
           "seed": cfg["seed"], "config": cfg}
    doc.update(extra)
    write_json(os.path.join(out_dir, name), doc)


def cmd_simulate(cfg, args) -> int:
    scene = Scene(cfg)
    balls = [_parse_ball(b) for b in (args.ball or [])]
    ren = Renderer(scene.geom, scene.camera, scene.pose, scene.rig, scene.shading)
    reference = ren.render()
    raw = ren.render(balls) if balls else reference
    # images are what the camera sees; ground truth lives on the undistorted
    # lattice where reconstruct and evaluate operate
    truth_ren = Renderer(scene.geom, scene.target, scene.pose, scene.rig)
    gt = truth_ren.ground_truth(balls if balls else None)
    out = ensure_dir(cfg["out"])
    save_ppm(os.path.join(out, "raw.ppm"), raw.values)
    save_ppm(os.path.join(out, "reference.ppm"), reference.values)
    save_float_raw(os.path.join(out, "depth.f32"), gt.depth_map)
    # one mask image, priority contact > occluded > valid
    levels = np.zeros(gt.valid_mask.shape, dtype=np.float64)
    levels[gt.valid_mask] = 70.0 / 255.0
    levels[gt.occlusion_mask] = 140.0 / 255.0
    levels[gt.contact_mask] = 1.0
    save_pgm(os.path.join(out, "masks.pgm"), levels)
    _manifest(out, "simulate_manifest.json", cfg, "simulate", {
        "balls": [[*map(float, b.center), float(b.radius)] for b in balls],
        "outputs": ["raw.ppm", "reference.ppm", "depth.f32", "masks.pgm"],
        "contact_pixels": int(gt.contact_mask.sum()),
    })
    return 0


def cmd_calibrate(cfg, args) -> int:
    if cfg["probes"] <= 0:
        raise ConfigError("probes must be positive")
    scene = Scene(cfg)
    plan = sample_surface(scene.geom, cfg["probes"], seed=cfg["seed"])
    stream = iter_probing(scene.geom, scene.camera, scene.pose, plan,
                          depth=cfg["indent_depth"], ball_radius=cfg["ball_radius"],
                          rig=scene.rig, shading=scene.shading,
                          target_camera=scene.target)
    # samples stream straight into dataset assembly so a desk-scale run does
    # not hold thousands of full-resolution images; minimum points are
    # harvested on the way past for the pose solve
    corrs = []

    def tee():
        for sample in stream:
            corrs.append(minimum_point(sample))
            yield sample

    try:
        ds = build_dataset(tee(), balance_fraction=cfg["balance_fraction"],
                           seed=cfg["seed"], geom=scene.geom, camera=scene.camera,
                           rim_erode=cfg["rim_erode"])
    except ValueError:
        if not corrs:
            raise RuntimeError(
                "every probe was excluded: no contact observed") from None
        raise
    ds = dataclasses.replace(ds, excluded_probes=len(plan) - len(corrs))
    est, inliers = pose_from_correspondences(corrs, scene.target,
                                             n=min(100, len(corrs)),
                                             seed=cfg["seed"])
    cosang = (np.trace(est.rotation @ scene.pose.rotation.T) - 1.0) / 2.0
    rot_deg = float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    trans_mm = float(np.linalg.norm(est.translation - scene.pose.translation))
    out = ensure_dir(cfg["out"])
    ds.save(os.path.join(out, "dataset.csv"),
            os.path.join(out, "dataset_manifest.json"))
    _manifest(out, "calibrate_manifest.json", cfg, "calibrate", {
        "probes_planned": len(plan),
        "probes_kept": len(corrs),
        "pose_delta_deg": rot_deg,
        "pose_delta_mm": trans_mm,
        "pnp_inliers": len(inliers),
        "dataset_rows": len(ds.rows),
        "outputs": ["dataset.csv", "dataset_manifest.json"],
    })
    return 0


def cmd_train(cfg, args) -> int:
    path = args.dataset or os.path.join(cfg["out"], "dataset.csv")
    if not os.path.exists(path):
        raise ConfigError(f"dataset: no such file '{path}'")
    rows = load_dataset_csv(path)
    tr = dict(cfg["training"])
    tr.setdefault("seed", cfg["seed"])
    tr["hidden_sizes"] = tuple(tr["hidden_sizes"])
    try:
        tcfg = TrainConfig(**tr)
    except ValueError as e:
        raise ConfigError(f"training: {e}") from e
    result = train(rows, tcfg)
    out = ensure_dir(cfg["out"])
    save_model(result.model, os.path.join(out, "model.json"))
    lines = ["epoch,train_mse,val_mse,lr"]
    for i, (t, v, lr) in enumerate(zip(result.train_loss, result.val_loss,
                                       result.lr)):
        lines.append(f"{i},{fmt_float(t)},{fmt_float(v)},{fmt_float(lr)}")
    with open(os.path.join(out, "loss.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _manifest(out, "train_manifest.json", cfg, "train", {
        "dataset": path,
        "rows": len(rows),
        "final_train_mse": float(result.train_loss[-1]),
        "final_val_mse": float(result.val_loss[-1]),
        "outputs": ["model.json", "loss.csv"],
    })
    return 0


def cmd_reconstruct(cfg, args) -> int:
    for key, path in (("model", args.model), ("raw", args.raw),
                      ("reference", args.reference)):
        if not os.path.exists(path):
            raise ConfigError(f"{key}: no such file '{path}'")
    scene = Scene(cfg)
    model = load_model(args.model)
    raw = scene.undistort(load_ppm(args.raw))
    reference = scene.undistort(load_ppm(args.reference))
    rec = Reconstructor(model, scene.geom, scene.target, scene.pose,
                        scene.rig, scene.shading).reconstruct(raw, reference)
    out = ensure_dir(cfg["out"])
    save_float_raw(os.path.join(out, "height.f32"), rec.height.values)
    save_pgm(os.path.join(out, "roi.pgm"), rec.height.mask)
    save_ply(os.path.join(out, "cloud.ply"), rec.cloud.points,
             rec.cloud.indentation)
    _manifest(out, "reconstruct_manifest.json", cfg, "reconstruct", {
        "model": args.model,
        "rois": len(rec.rois),
        "points": len(rec.cloud.points),
        "no_contact": not rec.rois,
        "outputs": ["height.f32", "roi.pgm", "cloud.ply"],
    })
    return 0


def cmd_evaluate(cfg, args) -> int:
    import types

    for key, path in (("recon-dir", args.recon_dir), ("truth-dir", args.truth_dir)):
        if not os.path.isdir(path):
            raise ConfigError(f"{key}: no such directory '{path}'")
    scene = Scene(cfg)
    probe_ren = Renderer(scene.geom, scene.target, scene.pose,
                         scene.rig, scene.shading)
    h, w = probe_ren.shape
    surface_z = np.where(probe_ren.valid.reshape(h, w),
                         probe_ren.hit_points[:, 2].reshape(h, w), np.nan)
    stems = sorted(f[: -len("_height.f32")] for f in os.listdir(args.recon_dir)
                   if f.endswith("_height.f32"))
    if not stems:
        raise ConfigError(f"recon-dir: no *_height.f32 files in '{args.recon_dir}'")
    metrics = []
    for i, stem in enumerate(stems):
        height = load_float_raw(os.path.join(args.recon_dir, f"{stem}_height.f32"))
        mask = load_pgm(os.path.join(args.recon_dir, f"{stem}_roi.pgm")) > 0.5
        depth = load_float_raw(os.path.join(args.truth_dir, f"{stem}_depth.f32"))
        gtmask = load_pgm(os.path.join(args.truth_dir, f"{stem}_masks.pgm"))
        gt = types.SimpleNamespace(depth_map=depth,
                                   contact_mask=np.isclose(gtmask, 1.0))
        rec = types.SimpleNamespace(height=HeightMap(values=height, mask=mask))
        metrics.append(evaluate(rec, gt, surface_z, scene.geom.height, probe=i))
    out = ensure_dir(cfg["out"])
    save_metrics(os.path.join(out, "metrics.csv"), metrics)
    write_json(os.path.join(out, "summary.json"), summarize(metrics))
    _manifest(out, "evaluate_manifest.json", cfg, "evaluate", {
        "pairs": len(stems),
        "outputs": ["metrics.csv", "summary.json"],
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="curvetact",
        description="Simulate, calibrate, train, and reconstruct a curved "
                    "camera-based tactile sensor.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--profile", choices=sorted(_PROFILES))

    sp = sub.add_parser("simulate", help="render a declared scene")
    common(sp)
    sp.add_argument("--ball", action="append",
                    help="probe ball as x,y,z,r (repeatable)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("calibrate", help="probe plan, pose recovery, dataset")
    common(sp)
    sp.add_argument("--probes", type=int, default=None)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("train", help="fit the gradient lookup on a dataset")
    common(sp)
    sp.add_argument("--dataset", help="dataset CSV (default <out>/dataset.csv)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("reconstruct", help="height map and cloud from images")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--raw", required=True)
    sp.add_argument("--reference", required=True)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("evaluate", help="metrics for reconstructions vs truth")
    common(sp)
    sp.add_argument("--recon-dir", required=True)
    sp.add_argument("--truth-dir", required=True)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure, distinct from usage problems
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
