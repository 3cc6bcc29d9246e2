"""``plencal`` command line: synth, calibrate, eval, export and sweep.

Exit codes: 0 success, 2 bad input (usage, config, missing or malformed
file), 3 synthetic generation failure, 4 pipeline failure (stage named on
stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as pio
from .errors import InvalidConfig, PipelineFailure, PlencalError
from .model import INTRINSIC_NAMES

log = logging.getLogger("plencal")

EXIT_OK, EXIT_INPUT, EXIT_GENERATION, EXIT_PIPELINE = 0, 2, 3, 4


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _fail(code, msg):
    print(f"error: {msg}", file=sys.stderr)
    return code


def _csv_list(text, cast=str):
    return [cast(x) for x in text.split(",") if x.strip()] if text else []


def _existing(path):
    if path is not None and not Path(path).is_file():
        raise InputError(f"file not found: {path}")
    return path


# -- synth ---------------------------------------------------------------------

def cmd_synth(args):
    from .synthgen import R5_16MM, SENSOR_SIZE, DEFAULT_PITCH, generate, generate_hex_grid

    try:
        spec, extra = pio.read_scene_config(_existing(args.config))
        if args.seed is not None:
            spec = replace(spec, rng_seed=args.seed)
        pitch = float(extra.get("pitch_px", DEFAULT_PITCH))
        w = int(extra.get("sensor_w_px", SENSOR_SIZE[0]))
        h = int(extra.get("sensor_h_px", SENSOR_SIZE[1]))
        if pitch < 4:
            raise InvalidConfig("pitch_px", "must be at least 4 px")
        intr = extra.get("intrinsics", R5_16MM)
    except InvalidConfig as exc:
        return _fail(EXIT_INPUT, f"invalid config: {exc}")
    except pio.FormatError as exc:
        return _fail(EXIT_INPUT, str(exc))
    try:
        ds = generate(spec, intr, generate_hex_grid(w, h, pitch))
    except (PlencalError, ValueError) as exc:
        return _fail(EXIT_GENERATION, f"generation failed: {exc}")
    ds.nominal_f_L = extra.get("nominal_f_L_mm")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pio.write_dataset(out / "dataset.json", ds, seed=spec.rng_seed)
    pio.write_groundtruth(out / "groundtruth.json", ds, spec)
    pio.write_tum(out / "groundtruth.tum", ds.poses_gt)
    print(f"wrote {out / 'dataset.json'} ({len(ds.observations)} observations, "
          f"{len(ds.points_gt)} points, {len(ds.poses_gt)} views)")
    return EXIT_OK


# -- calibrate ------------------------------------------------------------------

def _figures_dir(path):
    if path is None:
        return None
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_calibrate(args):
    from .ba import evaluate_cost, residuals
    from .pipeline import PipelineConfig, calibrate

    inp, seed = pio.read_dataset(_existing(args.dataset))
    fixed = set(_csv_list(args.fix))
    unknown = fixed - set(INTRINSIC_NAMES)
    if unknown:
        raise InputError(f"--fix: unknown parameter(s) {sorted(unknown)}")
    if args.mode == "recalib" and args.nominal is None:
        raise InputError("recalib mode requires --nominal (values for the fixed f_L and B)")
    if args.nominal is not None:
        inp.nominal = pio.read_calibration(_existing(args.nominal))
    if args.seed is not None:
        seed = args.seed
    config = PipelineConfig(mode=args.mode, fixed=tuple(sorted(fixed)), seed=int(seed or 0), trim=not args.no_trim)
    try:
        res = calibrate(inp, config)
    except PipelineFailure as exc:
        return _fail(EXIT_PIPELINE, f"pipeline failed in stage '{exc.stage}': {exc}")

    cost, stats = evaluate_cost(res.problem)
    fixed_out = set(fixed) | ({"f_L", "B"} if args.mode == "recalib" else set())
    solver = res.report.to_dict()
    solver.update(residual_stats=stats)
    report = {
        "mode": args.mode,
        "fixed": sorted(fixed_out),
        "timings_s": res.timings,
        "warnings": res.warnings,
        "metric_scale": res.scale,
        "trimmed_observations": res.trimmed,
        "singular_clusters": res.singular_clusters,
        "dropped_points": len(res.dropped_points),
        "registered_views": [int(v) for v in res.view_ids],
        "num_points": int(len(res.point_ids)),
        "initial": pio.intrinsics_to_dict(res.initial),
        "pinhole": {"f_px": res.pinhole.f_px, "c_x_px": res.pinhole.c_x, "c_y_px": res.pinhole.c_y},
        "final_cost": cost,
        "solver_report": solver,
    }
    out = Path(args.out)
    traj = Path(args.trajectory) if args.trajectory else out.with_suffix(".tum")
    rep = Path(args.report) if args.report else out.with_name(out.stem + "_report.json")
    # write everything to a scratch directory first so a failure leaves no partial output
    with tempfile.TemporaryDirectory() as tmp:
        t = Path(tmp)
        pio.write_calibration(t / "c", res.intrinsics, fixed_out, solver)
        pio.write_tum(t / "t", res.poses, res.view_ids)
        with open(t / "r", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1)
            fh.write("\n")
        for src, dst in (("c", out), ("t", traj), ("r", rep)):
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.move(str(t / src), dst)
    figs = _figures_dir(args.figures)
    if figs is not None:
        from . import plotting
        from .evaluation import positions

        r, invalid = residuals(res.problem)
        plotting.plot_residuals(r[~invalid], figs / "residuals.png")
        plotting.plot_cost_history(res.report, figs / "cost.png")
        plotting.plot_trajectory(positions(res.poses), None, figs / "trajectory.png")
    intr = res.intrinsics
    print(f"f_L={intr.f_L:.6f} mm  b_L0={intr.b_L0:.6f} mm  B={intr.B:.6f} mm  "
          f"c=({intr.c_x:.3f}, {intr.c_y:.3f}) px  cost={cost:.6g}  [{res.report.termination}]")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------

def _read_traj(path):
    """TUM file or ground-truth JSON -> (timestamps, camera-from-world poses)."""
    if str(path).endswith(".json"):
        _, poses, _ = pio.read_groundtruth(path)
        return np.arange(len(poses), dtype=float), poses
    return pio.read_tum(path)


def cmd_eval(args):
    from .evaluation import associate, markdown_table, parameter_report, trajectory_extent, trajectory_rmse

    for p in (args.est, args.ref, args.est_traj, args.ref_traj):
        _existing(p)
    est = pio.read_calibration(args.est)
    ref = pio.read_calibration(args.ref)
    params = parameter_report(est, ref)
    out = {"parameters": params}
    if args.est_traj and args.ref_traj:
        te, pe = _read_traj(args.est_traj)
        tr, pr = _read_traj(args.ref_traj)
        pairs = associate(te, tr, args.max_dt)
        a = [pe[i] for i in pairs[:, 0]]
        b = [pr[j] for j in pairs[:, 1]]
        modes = ("rigid", "similarity") if args.align == "both" else (args.align,)
        out["trajectory"] = {"associated": int(len(pairs)), "extent_mm": trajectory_extent(b)}
        for m in modes:
            out["trajectory"][m] = trajectory_rmse(a, b, m).to_dict()
        figs = _figures_dir(args.figures)
        if figs is not None:
            from . import plotting
            from .evaluation import positions

            tr_sim = trajectory_rmse(a, b, modes[-1])
            pa = tr_sim.scale * positions(a) @ tr_sim.rotation.T + tr_sim.translation
            plotting.plot_trajectory(pa, positions(b), figs / "trajectory.png", f"{modes[-1]} alignment")
    table = markdown_table(params)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=1)
            fh.write("\n")
    if args.markdown:
        Path(args.markdown).write_text(table, encoding="utf-8")
    print(table, end="")
    if "trajectory" in out:
        for m in ("rigid", "similarity"):
            if m in out["trajectory"]:
                t = out["trajectory"][m]
                print(f"trajectory {m}: rmse={t['rmse_mm']:.4f} mm scale={t['scale']:.6f}")
    return EXIT_OK


# -- export -------------------------------------------------------------------------

def _virtual_samples(intr, inp):
    """Per-cluster ``(point, view, x_V', y_V', v)`` with a finite metric depth."""
    from .sfm import virtual_track_centroids

    obs, _ = inp.observations.filter_min_views(1)
    cm = virtual_track_centroids(obs, inp.grid, intr)
    ok = np.isfinite(cm.v) & (cm.v * intr.B + intr.b_L0 > intr.f_L)
    return cm.point[ok], cm.view[ok], cm.xy[ok], cm.v[ok]


def cmd_export(args):
    from . import downstream as ds
    from .model import VirtualPoint

    intr = pio.read_calibration(_existing(args.calibration))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.what == "undistort-map":
        _existing(args.dataset) if args.dataset else None
        if args.dataset:
            inp, _ = pio.read_dataset(args.dataset)
            w, h = inp.grid.sensor_width, inp.grid.sensor_height
        else:
            w, h = args.width, args.height
        m = ds.build_undistortion_map(intr, w, h, args.step)
        with open(out, "w", encoding="utf-8") as fh:
            json.dump({"step_px": args.step, "xs": m.xs.tolist(), "ys": m.ys.tolist(),
                       "table": np.round(m.table, 6).tolist()}, fh)
        print(f"wrote {out} ({len(m.ys)} x {len(m.xs)} nodes)")
        return EXIT_OK

    if args.dataset is None:
        raise InputError(f"export {args.what} needs a dataset")
    inp, _ = pio.read_dataset(_existing(args.dataset))
    point, view, xy, v = _virtual_samples(intr, inp)
    if args.what == "rgbd":
        with open(out, "w", encoding="utf-8") as fh:
            for j in np.unique(view):
                sel = view == j
                f = ds.export_rgbd_frame(intr, VirtualPoint(xy[sel, 0], xy[sel, 1], v[sel]), args.plane_v)
                rec = {"view": int(j), "fx": f["fx"], "fy": f["fy"], "cx": f["cx"], "cy": f["cy"],
                       "plane_v": f["plane_v"],
                       "points": [[int(p), float(x), float(y), float(z)]
                                  for p, x, y, z in zip(point[sel], f["x"], f["y"], f["depth"])]}
                fh.write(json.dumps(rec) + "\n")
        print(f"wrote {out} ({len(np.unique(view))} frames)")
        return EXIT_OK

    # cloud: lift every cluster with its view pose, then average per point
    if args.trajectory is None:
        raise InputError("export cloud needs --trajectory (the TUM file written by calibrate)")
    ts, poses = pio.read_tum(_existing(args.trajectory))
    by_view = {int(round(t)): p for t, p in zip(ts, poses)}
    keep = np.array([int(j) in by_view for j in view], dtype=bool)
    point, view, xy, v = point[keep], view[keep], xy[keep], v[keep]
    pts = np.zeros((0, 3))
    if len(v):
        vids = sorted(set(view.tolist()))
        local = {j: k for k, j in enumerate(vids)}
        samples = np.column_stack([[local[j] for j in view], xy, v])
        cloud = ds.export_point_cloud(intr, [by_view[j] for j in vids], depth_samples=samples)
        # export_point_cloud groups rows by view: recover the matching point ids
        order = np.concatenate([np.flatnonzero(samples[:, 0] == k) for k in range(len(vids))])
        pid = point[order]
        uniq, inv = np.unique(pid, return_inverse=True)
        pts = np.zeros((len(uniq), 3))
        np.add.at(pts, inv, cloud)
        pts /= np.bincount(inv)[:, None]
    ds.write_ply(out, pts)
    print(f"wrote {out} ({len(pts)} points)")
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------------

def cmd_sweep(args):
    from .evaluation import robustness_sweep, write_sweep_csv
    from .pipeline import PipelineConfig

    ds = pio.read_synthetic(_existing(args.dataset), _existing(args.groundtruth))
    pts = _csv_list(args.points, int)
    views = _csv_list(args.views, int)
    if not pts or not views:
        raise InputError("--points and --views need at least one value each")
    workers = args.workers or int(os.environ.get("PLENCAL_THREADS", "1") or 1)
    cells, runs = robustness_sweep(ds, pts, views, args.repeats, PipelineConfig(), args.seed or 0, workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out, cells)
    with open(out.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump({"cells": cells, "runs": runs}, fh, indent=1, default=float)
        fh.write("\n")
    figs = _figures_dir(args.figures)
    if figs is not None:
        from . import plotting

        for name in ("f_L", "b_L0", "B", "c_x", "c_y"):
            plotting.plot_sweep(cells, name, figs / f"sweep_{name}.png")
    for c in cells:
        print(f"points={c['num_points']:5d} views={c['num_views']:3d} failures={c['failures']}/{c['runs']} "
              f"f_L={c['rmse_pct_f_L']:.4f}% B={c['rmse_pct_B']:.4f}%")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="plencal", description="Plenoptic camera calibration by bundle adjustment.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="scene config JSON (defaults if omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("calibrate", help="calibrate from a dataset")
    c.add_argument("dataset")
    c.add_argument("--mode", choices=("full", "recalib"), default="full")
    c.add_argument("--fix", default="", help="comma-separated parameters to hold fixed")
    c.add_argument("--nominal", help="calibration JSON with nominal values")
    c.add_argument("--out", required=True, help="calibration JSON")
    c.add_argument("--trajectory", help="TUM output (default: <out>.tum)")
    c.add_argument("--report", help="report JSON (default: <out>_report.json)")
    c.add_argument("--figures", help="directory for optional PNG figures")
    c.add_argument("--seed", type=int)
    c.add_argument("--no-trim", action="store_true", help="skip the residual trimming pass")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("eval", help="compare a calibration against a reference")
    e.add_argument("--est", required=True, help="estimated calibration JSON")
    e.add_argument("--ref", required=True, help="reference calibration or ground-truth JSON")
    e.add_argument("--est-traj", help="estimated TUM trajectory")
    e.add_argument("--ref-traj", help="reference TUM trajectory or ground-truth JSON")
    e.add_argument("--align", choices=("rigid", "similarity", "both"), default="both")
    e.add_argument("--max-dt", type=float, default=0.02, help="timestamp association tolerance")
    e.add_argument("--out", help="report JSON")
    e.add_argument("--markdown", help="markdown table output")
    e.add_argument("--figures")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="export depth, point cloud or undistortion data")
    x.add_argument("calibration")
    x.add_argument("dataset", nargs="?")
    x.add_argument("--what", choices=("cloud", "rgbd", "undistort-map"), required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--trajectory", help="TUM trajectory from calibrate (cloud)")
    x.add_argument("--plane-v", type=float, default=2.0, help="projection plane in units of B (rgbd)")
    x.add_argument("--step", type=float, default=8.0, help="table step in px (undistort-map)")
    x.add_argument("--width", type=int, default=2048)
    x.add_argument("--height", type=int, default=2048)
    x.set_defaults(func=cmd_export)

    w = sub.add_parser("sweep", help="robustness sweep over point and view counts")
    w.add_argument("--dataset", required=True)
    w.add_argument("--groundtruth", required=True)
    w.add_argument("--points", required=True, help="comma-separated point counts")
    w.add_argument("--views", required=True, help="comma-separated view counts")
    w.add_argument("--repeats", type=int, default=1)
    w.add_argument("--workers", type=int, help="parallel cells (default: PLENCAL_THREADS or 1)")
    w.add_argument("--seed", type=int)
    w.add_argument("--out", required=True, help="CSV grid (a JSON twin is written next to it)")
    w.add_argument("--figures")
    w.set_defaults(func=cmd_sweep)
    return p


def _thread_limit():
    n = os.environ.get("PLENCAL_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise InputError(f"PLENCAL_THREADS must be an integer, got {n!r}") from None
    if n < 1:
        raise InputError("PLENCAL_THREADS must be at least 1")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        n = _thread_limit()
        if n is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n):
            return args.func(args)
    except InputError as exc:
        return _fail(EXIT_INPUT, str(exc))
    except (pio.FormatError, InvalidConfig) as exc:
        return _fail(EXIT_INPUT, str(exc))
    except PipelineFailure as exc:
        return _fail(EXIT_PIPELINE, f"pipeline failed in stage '{exc.stage}': {exc}")


if __name__ == "__main__":
    sys.exit(main())
