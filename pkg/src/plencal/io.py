"""JSON dataset / ground truth / calibration files and TUM trajectories."""

from __future__ import annotations

import json
from dataclasses import fields

import numpy as np

from .data import ObservationSet, ScaleConstraint
from .errors import InvalidConfig
from .geometry import Pose, quat_to_matrix
from .model import DISTORTION_NAMES, DistortionCoeffs, MicroLensGrid, PlenopticIntrinsics


class FormatError(ValueError):
    """A file does not follow the expected schema."""


def _dump(obj, path):
    text = json.dumps(obj, indent=1, sort_keys=False, allow_nan=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def _load(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _require(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise FormatError(f"{where}: missing '{key}'")
    return d[key]


# -- dataset -------------------------------------------------------------------

def dataset_to_dict(grid, observations, s_x, s_y, scale_constraints=(), nominal_f_L=None, seed=None):
    cam = {"sensor_w_px": int(grid.sensor_width), "sensor_h_px": int(grid.sensor_height),
           "pixel_size_x_mm": float(s_x), "pixel_size_y_mm": float(s_y)}
    if nominal_f_L is not None:
        cam["nominal_f_L_mm"] = float(nominal_f_L)
    d = {
        "camera": cam,
        "mla": {"centers": grid.as_records(), "micro_image_radius_px": float(grid.micro_image_radius)},
        "observations": [[int(p), int(v), int(l), float(x), float(y)]
                         for p, v, l, (x, y) in zip(observations.point_ids, observations.view_ids,
                                                   observations.lens_ids, observations.xy)],
        "scale_constraints": [{"a": c.point_a, "b": c.point_b, "distance_mm": c.distance, "weight": c.weight}
                              for c in scale_constraints],
    }
    if seed is not None:
        d["seed"] = int(seed)
    return d


def write_dataset(path, ds, seed=None):
    """Write a :class:`synthgen.SyntheticDataset` (observations only)."""
    _dump(dataset_to_dict(ds.grid, ds.observations, ds.intrinsics_gt.s_x, ds.intrinsics_gt.s_y,
                          ds.scale_constraints, ds.nominal_f_L, seed), path)


def read_dataset(path):
    """Load ``dataset.json`` into a :class:`pipeline.CalibrationInput`."""
    from .pipeline import CalibrationInput

    d = _load(path)
    cam = _require(d, "camera", path)
    mla = _require(d, "mla", path)
    try:
        grid = MicroLensGrid.from_records(_require(mla, "centers", "mla"),
                                          float(_require(mla, "micro_image_radius_px", "mla")),
                                          int(_require(cam, "sensor_w_px", "camera")),
                                          int(_require(cam, "sensor_h_px", "camera")))
        recs = np.asarray(_require(d, "observations", path), dtype=float).reshape(-1, 5)
        obs = ObservationSet.from_records(recs)
        cons = [ScaleConstraint(int(c["a"]), int(c["b"]), float(c["distance_mm"]), float(c.get("weight", 1.0)))
                for c in d.get("scale_constraints", [])]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed field ({exc})") from exc
    inp = CalibrationInput(grid, obs, float(_require(cam, "pixel_size_x_mm", "camera")),
                           float(_require(cam, "pixel_size_y_mm", "camera")), cons,
                           nominal_f_L=cam.get("nominal_f_L_mm"))
    return inp, d.get("seed")


# -- intrinsics / calibration ---------------------------------------------------

def intrinsics_to_dict(intr):
    return {"f_L_mm": intr.f_L, "b_L0_mm": intr.b_L0, "B_mm": intr.B, "c_x_px": intr.c_x, "c_y_px": intr.c_y,
            "pixel_size_x_mm": intr.s_x, "pixel_size_y_mm": intr.s_y,
            "distortion": {n: float(getattr(intr.distortion, n)) for n in DISTORTION_NAMES}}


def intrinsics_from_dict(d, where="intrinsics"):
    try:
        dist = d.get("distortion", {})
        unknown = set(dist) - set(DISTORTION_NAMES)
        if unknown:
            raise FormatError(f"{where}: unknown distortion coefficient(s) {sorted(unknown)}")
        return PlenopticIntrinsics(float(d["f_L_mm"]), float(d["b_L0_mm"]), float(d["B_mm"]), float(d["c_x_px"]),
                                   float(d["c_y_px"]), s_x=float(d.get("pixel_size_x_mm", 0.0055)),
                                   s_y=float(d.get("pixel_size_y_mm", 0.0055)),
                                   distortion=DistortionCoeffs(**{k: float(v) for k, v in dist.items()}))
    except KeyError as exc:
        raise FormatError(f"{where}: missing {exc}") from exc
    except (TypeError, AttributeError) as exc:
        raise FormatError(f"{where}: malformed intrinsics ({exc})") from exc
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from exc


def write_calibration(path, intr, fixed=(), solver_report=None, extra=None):
    d = intrinsics_to_dict(intr)
    d["fixed"] = sorted(fixed)
    d["solver_report"] = solver_report or {}
    if extra:
        d.update(extra)
    _dump(d, path)


def read_calibration(path):
    """Intrinsics from ``calibration.json`` (also accepts a ground-truth file)."""
    d = _load(path)
    if "intrinsics" in d and "f_L_mm" not in d:
        d = d["intrinsics"]
    return intrinsics_from_dict(d, str(path))


# -- ground truth ----------------------------------------------------------------

def write_groundtruth(path, ds, spec=None):
    d = {"intrinsics": intrinsics_to_dict(ds.intrinsics_gt),
         "poses": [{"view": j, "q": p.rotation.tolist(), "t_mm": p.translation.tolist()}
                   for j, p in enumerate(ds.poses_gt)],
         "points": ds.points_gt.tolist(),
         "outliers": np.flatnonzero(ds.outlier_mask).tolist() if ds.outlier_mask is not None else []}
    if spec is not None:
        d["scene"] = scene_to_dict(spec)
    _dump(d, path)


def read_groundtruth(path):
    d = _load(path)
    intr = intrinsics_from_dict(_require(d, "intrinsics", path), str(path))
    poses = [Pose(np.asarray(p["q"], float), np.asarray(p["t_mm"], float))
             for p in sorted(_require(d, "poses", path), key=lambda p: p["view"])]
    return intr, poses, np.asarray(d.get("points", []), float).reshape(-1, 3)


# -- synthetic scene config --------------------------------------------------------

_SCENE_EXTRA = ("intrinsics", "pitch_px", "sensor_w_px", "sensor_h_px", "nominal_f_L_mm")


def scene_to_dict(spec):
    out = {}
    for f in fields(spec):
        v = getattr(spec, f.name)
        if f.name == "trajectory":
            if v is not None:
                out[f.name] = [{"q": p.rotation.tolist(), "t_mm": p.translation.tolist()} for p in v]
            continue
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def read_scene_config(path):
    """Parse a synth config: any :class:`SceneSpec` field plus optional
    ``intrinsics`` (calibration schema), ``pitch_px``, ``sensor_w_px``,
    ``sensor_h_px`` and ``nominal_f_L_mm``. Raises :class:`InvalidConfig`
    naming the first offending field."""
    from .synthgen import SceneSpec

    d = _load(path) if path is not None else {}
    if not isinstance(d, dict):
        raise InvalidConfig("<root>", "config must be a JSON object")
    names = {f.name for f in fields(SceneSpec)}
    kw = {}
    for key, val in d.items():
        if key in _SCENE_EXTRA:
            continue
        if key not in names:
            raise InvalidConfig(key, "unknown field")
        if key == "trajectory" and val is not None:
            try:
                val = [Pose(np.asarray(p["q"], float), np.asarray(p["t_mm"], float)) for p in val]
            except (KeyError, TypeError, ValueError) as exc:
                raise InvalidConfig("trajectory", str(exc)) from exc
        elif key in ("box_min", "box_max", "amplitude"):
            if not (isinstance(val, list) and len(val) == 3):
                raise InvalidConfig(key, "must be a list of three numbers")
            val = tuple(float(x) for x in val)
        elif key in ("num_points", "num_views", "rng_seed", "num_scale_constraints"):
            if isinstance(val, bool) or not isinstance(val, int):
                raise InvalidConfig(key, "must be an integer")
        elif not isinstance(val, (int, float)) or isinstance(val, bool):
            raise InvalidConfig(key, "must be a number")
        kw[key] = val
    spec = SceneSpec(**kw)
    spec.validate()
    extra = {k: d[k] for k in _SCENE_EXTRA if k in d}
    if "intrinsics" in extra:
        try:
            extra["intrinsics"] = intrinsics_from_dict(extra["intrinsics"])
        except (FormatError, ValueError, TypeError) as exc:
            raise InvalidConfig("intrinsics", str(exc)) from exc
    for key in ("pitch_px", "sensor_w_px", "sensor_h_px", "nominal_f_L_mm"):
        if key in extra and (isinstance(extra[key], bool) or not isinstance(extra[key], (int, float))
                             or not extra[key] > 0):
            raise InvalidConfig(key, "must be a positive number")
    return spec, extra


# -- TUM trajectories ----------------------------------------------------------------

def write_tum(path, poses, timestamps=None):
    """One ``t tx ty tz qx qy qz qw`` line per camera-from-world pose, written
    as the world-from-camera transform (camera position and orientation)."""
    if timestamps is None:
        timestamps = range(len(poses))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, p in zip(timestamps, poses):
            inv = p.inverse()
            vals = [float(ts), *inv.translation, *inv.rotation]
            fh.write(" ".join(f"{x:.9g}" if i == 0 else f"{x:.9f}" for i, x in enumerate(vals)) + "\n")


def read_tum(path):
    """``(timestamps, poses)`` with poses converted back to camera-from-world."""
    ts, poses = [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{n}: expected 8 values, got {len(parts)}")
            v = [float(x) for x in parts]
            q = np.asarray(v[4:8])
            q = q / np.linalg.norm(q)
            R = quat_to_matrix(q)
            ts.append(v[0])
            poses.append(Pose.from_matrix(R.T, -R.T @ np.asarray(v[1:4])))
    return np.array(ts), poses


def read_synthetic(dataset_path, groundtruth_path):
    """Rebuild a :class:`synthgen.SyntheticDataset` from a dataset and its
    ground-truth sidecar (used by sweeps and evaluation)."""
    from .synthgen import SyntheticDataset

    inp, _ = read_dataset(dataset_path)
    intr, poses, points = read_groundtruth(groundtruth_path)
    if len(poses) < inp.observations.num_views or len(points) < inp.observations.num_points:
        raise FormatError("ground truth does not cover every view and point of the dataset")
    gt = _load(groundtruth_path)
    mask = np.zeros(len(inp.observations), dtype=bool)
    mask[np.asarray(gt.get("outliers", []), dtype=np.int64)] = True
    return SyntheticDataset(intr, inp.grid, poses, points, inp.observations, inp.scale_constraints,
                            None, mask, inp.nominal_f_L)
