import json

import numpy as np
import pytest

from plencal import io as pio
from plencal.cli import main
from plencal.downstream import metric_depth, read_ply
from plencal.errors import InvalidConfig
from plencal.synthgen import SceneSpec, generate

SMALL = {"num_points": 150, "num_views": 10, "noise_sigma": 0.0, "rng_seed": 4}


def _config(tmp, **kw):
    path = tmp / "scene.json"
    path.write_text(json.dumps({**SMALL, **kw}))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Synthesize and calibrate a small noiseless scene once for the module."""
    tmp = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--config", str(_config(tmp)), "--out", str(tmp / "data")]) == 0
    code = main(["calibrate", str(tmp / "data" / "dataset.json"), "--out", str(tmp / "out" / "calib.json"),
                 "--fix", "k2", "--figures", str(tmp / "figs")])
    assert code == 0
    return tmp


def test_synth_writes_schema_valid_files(run):
    d = json.loads((run / "data" / "dataset.json").read_text())
    assert set(d) >= {"camera", "mla", "observations", "scale_constraints"}
    assert set(d["camera"]) >= {"sensor_w_px", "sensor_h_px", "pixel_size_x_mm", "pixel_size_y_mm"}
    assert all(len(c) == 3 for c in d["mla"]["centers"][:10])
    assert all(len(o) == 5 for o in d["observations"][:10])
    assert set(d["scale_constraints"][0]) == {"a", "b", "distance_mm", "weight"}
    g = json.loads((run / "data" / "groundtruth.json").read_text())
    assert len(g["poses"]) == 10 and len(g["points"]) == 150


def test_synth_same_seed_same_bytes(tmp_path):
    cfg = _config(tmp_path, noise_sigma=0.2, outlier_fraction=0.05)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("dataset.json", "groundtruth.json", "groundtruth.tum"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "9"]) == 0
    assert (tmp_path / "a" / "dataset.json").read_bytes() != (tmp_path / "c" / "dataset.json").read_bytes()


def test_synth_rejects_bad_config(tmp_path, capsys):
    assert main(["synth", "--config", str(_config(tmp_path, num_points=4)), "--out", str(tmp_path / "x")]) == 2
    assert "num_points" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"noise_sigmaa": 0.1}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2
    assert "noise_sigmaa" in capsys.readouterr().err


def test_synth_generation_failure(tmp_path, capsys):
    # cameras at the origin looking down +z, scene box behind them
    traj = [{"q": [0, 0, 0, 1], "t_mm": [10.0 * k, 0, 0]} for k in range(3)]
    cfg = _config(tmp_path, num_points=20, trajectory=traj, box_min=[-100, -100, -900], box_max=[100, 100, -500])
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 3
    assert "generation failed" in capsys.readouterr().err


def test_calibrate_outputs(run):
    cal = json.loads((run / "out" / "calib.json").read_text())
    assert set(cal) >= {"f_L_mm", "b_L0_mm", "B_mm", "c_x_px", "c_y_px", "pixel_size_x_mm", "pixel_size_y_mm",
                        "distortion", "fixed", "solver_report"}
    assert cal["fixed"] == ["k2"]
    assert cal["distortion"]["k2"] == 0.0
    intr_gt, poses_gt, _ = pio.read_groundtruth(run / "data" / "groundtruth.json")
    intr = pio.read_calibration(run / "out" / "calib.json")
    np.testing.assert_allclose(intr.to_vector()[:5], intr_gt.to_vector()[:5], rtol=1e-6)
    ts, poses = pio.read_tum(run / "out" / "calib.tum")
    assert ts.tolist() == list(range(10))
    rep = json.loads((run / "out" / "calib_report.json").read_text())
    assert rep["mode"] == "full" and rep["solver_report"]["termination"]
    assert (run / "figs" / "residuals.png").stat().st_size > 0


def test_eval_markdown_matches_json(run, capsys):
    code = main(["eval", "--est", str(run / "out" / "calib.json"), "--ref", str(run / "data" / "groundtruth.json"),
                 "--est-traj", str(run / "out" / "calib.tum"), "--ref-traj", str(run / "data" / "groundtruth.tum"),
                 "--out", str(run / "eval.json"), "--markdown", str(run / "eval.md")])
    assert code == 0
    rep = json.loads((run / "eval.json").read_text())
    md = (run / "eval.md").read_text().splitlines()
    names = list(rep["parameters"])
    for row, key in ((md[2], "estimate"), (md[4], "rel_dev_pct")):
        cells = [float(c) for c in row.split("|")[2:-1]]
        ref = [rep["parameters"][n][key] for n in names]
        np.testing.assert_allclose(cells, ref, rtol=1e-5, atol=5e-4)
    tr = rep["trajectory"]
    assert tr["associated"] == 10
    assert tr["similarity"]["rmse_mm"] < 1e-3 and tr["similarity"]["scale"] == pytest.approx(1.0, abs=1e-6)
    assert "trajectory similarity" in capsys.readouterr().out


def test_eval_self_is_zero(run):
    cal = str(run / "out" / "calib.json")
    assert main(["eval", "--est", cal, "--ref", cal, "--out", str(run / "self.json")]) == 0
    rep = json.loads((run / "self.json").read_text())
    assert all(v["rel_dev"] == 0 for v in rep["parameters"].values())


def test_missing_files_exit_2(run, tmp_path):
    assert main(["eval", "--est", str(tmp_path / "nope.json"), "--ref", str(run / "out" / "calib.json")]) == 2
    assert main(["calibrate", str(tmp_path / "nope.json"), "--out", str(tmp_path / "c.json")]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["calibrate", str(broken), "--out", str(tmp_path / "c.json")]) == 2
    with pytest.raises(SystemExit) as ei:
        main(["calibrate"])
    assert ei.value.code == 2


def test_recalib_needs_nominal(run, tmp_path):
    code = main(["calibrate", str(run / "data" / "dataset.json"), "--mode", "recalib",
                 "--out", str(tmp_path / "c.json")])
    assert code == 2
    assert not (tmp_path / "c.json").exists()
    assert main(["calibrate", str(run / "data" / "dataset.json"), "--fix", "focal",
                 "--out", str(tmp_path / "c.json")]) == 2


def test_pipeline_failure_names_stage(run, tmp_path, capsys):
    d = json.loads((run / "data" / "dataset.json").read_text())
    d["observations"] = [o for o in d["observations"] if o[1] == 0]  # a single view
    path = tmp_path / "one_view.json"
    path.write_text(json.dumps(d))
    assert main(["calibrate", str(path), "--out", str(tmp_path / "c.json")]) == 4
    assert "stage 'sfm-init'" in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == [path]


def test_export_cloud(run):
    out = run / "cloud.ply"
    assert main(["export", str(run / "out" / "calib.json"), str(run / "data" / "dataset.json"), "--what", "cloud",
                 "--trajectory", str(run / "out" / "calib.tum"), "--out", str(out)]) == 0
    assert out.read_text().startswith("ply\nformat ascii 1.0\nelement vertex ")
    cloud = read_ply(out)
    _, poses, pts = pio.read_groundtruth(run / "data" / "groundtruth.json")
    # the calibrated world frame is the frame of view 0
    ref = poses[0].transform(pts)
    assert len(cloud) == 150
    np.testing.assert_allclose(cloud, ref, atol=1e-3)


def test_export_rgbd_depths_are_metric_depth(run):
    out = run / "frames.jsonl"
    assert main(["export", str(run / "out" / "calib.json"), str(run / "data" / "dataset.json"), "--what", "rgbd",
                 "--out", str(out)]) == 0
    intr = pio.read_calibration(run / "out" / "calib.json")
    frames = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(frames) == 10
    from plencal.sfm import virtual_track_centroids

    inp, _ = pio.read_dataset(run / "data" / "dataset.json")
    cm = virtual_track_centroids(inp.observations, inp.grid, intr)
    f = frames[3]
    sel = cm.view == f["view"]
    expected = dict(zip(cm.point[sel].tolist(), metric_depth(intr, cm.v[sel]).tolist()))
    assert f["fx"] == pytest.approx((2 * intr.B + intr.b_L0) / intr.s_x)
    for p, _, _, z in f["points"]:
        assert z == expected[p]


def test_export_empty_cloud_and_undistort_map(run, tmp_path):
    empty_traj = tmp_path / "empty.tum"
    empty_traj.write_text("# no poses\n")
    out = tmp_path / "e.ply"
    assert main(["export", str(run / "out" / "calib.json"), str(run / "data" / "dataset.json"), "--what", "cloud",
                 "--trajectory", str(empty_traj), "--out", str(out)]) == 0
    assert "element vertex 0" in out.read_text()
    m = tmp_path / "map.json"
    assert main(["export", str(run / "out" / "calib.json"), "--what", "undistort-map", "--width", "64",
                 "--height", "32", "--step", "8", "--out", str(m)]) == 0
    lut = json.loads(m.read_text())
    assert lut["xs"][-1] >= 64 and len(lut["table"]) == len(lut["ys"])


def test_export_cloud_needs_trajectory(run, tmp_path):
    assert main(["export", str(run / "out" / "calib.json"), str(run / "data" / "dataset.json"), "--what", "cloud",
                 "--out", str(tmp_path / "c.ply")]) == 2


def test_sweep_command(run, tmp_path):
    out = tmp_path / "sweep.csv"
    code = main(["sweep", "--dataset", str(run / "data" / "dataset.json"), "--groundtruth",
                 str(run / "data" / "groundtruth.json"), "--points", "150,5", "--views", "10", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("num_points,num_views,runs,failures")
    assert len(lines) == 3
    assert json.loads(out.with_suffix(".json").read_text())["cells"][1]["failures"] == 1


def test_threads_env_validated(run, monkeypatch):
    monkeypatch.setenv("PLENCAL_THREADS", "zero")
    cal = str(run / "out" / "calib.json")
    assert main(["eval", "--est", cal, "--ref", cal]) == 2
    monkeypatch.setenv("PLENCAL_THREADS", "1")
    assert main(["eval", "--est", cal, "--ref", cal]) == 0


def test_io_round_trips(tmp_path, small_noisy):
    ds = small_noisy
    pio.write_dataset(tmp_path / "d.json", ds, seed=5)
    pio.write_groundtruth(tmp_path / "g.json", ds)
    back = pio.read_synthetic(tmp_path / "d.json", tmp_path / "g.json")
    np.testing.assert_array_equal(back.observations.xy, ds.observations.xy)
    np.testing.assert_array_equal(back.points_gt, ds.points_gt)
    assert back.intrinsics_gt == ds.intrinsics_gt
    assert back.scale_constraints == ds.scale_constraints
    pio.write_tum(tmp_path / "t.tum", ds.poses_gt)
    _, poses = pio.read_tum(tmp_path / "t.tum")
    for a, b in zip(poses, ds.poses_gt):
        np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-6)


def test_io_format_errors(tmp_path):
    p = tmp_path / "t.tum"
    p.write_text("0 1 2 3\n")
    with pytest.raises(pio.FormatError):
        pio.read_tum(p)
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"f_L_mm": 16.0, "b_L0_mm": 15.0}))
    with pytest.raises(pio.FormatError):
        pio.read_calibration(p)
    p.write_text(json.dumps({"f_L_mm": 16.0, "b_L0_mm": 15.0, "B_mm": 0.3, "c_x_px": 1, "c_y_px": 1,
                             "distortion": {"k9": 1.0}}))
    with pytest.raises(pio.FormatError):
        pio.read_calibration(p)
    p.write_text(json.dumps({"num_views": "ten"}))
    with pytest.raises(InvalidConfig) as ei:
        pio.read_scene_config(p)
    assert ei.value.field == "num_views"


def test_scene_config_round_trip(tmp_path):
    spec = SceneSpec(num_points=30, num_views=4, noise_sigma=0.1, rng_seed=2)
    ds = generate(spec)
    pio.write_groundtruth(tmp_path / "g.json", ds, spec)
    scene = json.loads((tmp_path / "g.json").read_text())["scene"]
    (tmp_path / "s.json").write_text(json.dumps(scene))
    back, extra = pio.read_scene_config(tmp_path / "s.json")
    assert back == spec and extra == {}
