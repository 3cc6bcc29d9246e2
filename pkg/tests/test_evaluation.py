import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from plencal.errors import LengthMismatch, ZeroReference
from plencal.evaluation import (associate, markdown_table, parameter_report, relative_rmse, robustness_sweep,
                                trajectory_extent, trajectory_rmse, umeyama, write_sweep_csv)
from plencal.geometry import Pose
from plencal.model import PlenopticIntrinsics
from plencal.synthgen import R5_16MM, winding_trajectory

# 16 mm reference calibration and the estimates reported for it
REF_16 = PlenopticIntrinsics(16.748, 15.893, 0.376, 1018.7, 1054.2)
LIFCAL_16 = PlenopticIntrinsics(16.745, 15.893, 0.375, 1019.4, 1053.5)
# target-free scenes: Lab, Hallway, Office
SCENES = [PlenopticIntrinsics(16.609, 15.889, 0.338, 1022.7, 1056.9),
          PlenopticIntrinsics(16.788, 15.889, 0.384, 1019.3, 1050.0),
          PlenopticIntrinsics(16.771, 15.881, 0.379, 1021.9, 1045.8)]


def test_identical_calibrations_give_zero_deviation():
    rep = parameter_report(R5_16MM, R5_16MM)
    assert all(r["abs_dev"] == 0 and r["rel_dev"] == 0 for r in rep.values())
    assert list(rep) == ["f_L", "b_L0", "B", "c_x", "c_y"]


def test_published_16mm_deviations():
    rep = parameter_report(LIFCAL_16, REF_16)
    pct = [round(rep[n]["rel_dev_pct"], 3) for n in rep]
    assert pct == [0.018, 0.0, 0.266, 0.069, 0.066]


def test_published_scene_rmse():
    r = relative_rmse(SCENES, REF_16)
    assert [round(r[n], 3) for n in r] == [0.505, 0.048, 5.981, 0.292, 0.535]


def test_rmse_hand_computation():
    ests = [REF_16.with_values(f_L=16.748 * (1 + e)) for e in (0.01, -0.02, 0.02)]
    # sqrt((1 + 4 + 4) / 3) = sqrt(3) percent
    assert relative_rmse(ests, REF_16)["f_L"] == pytest.approx(np.sqrt(3.0), rel=1e-12)
    assert relative_rmse(ests, REF_16)["B"] == 0.0


def test_zero_reference():
    with pytest.raises(ZeroReference):
        parameter_report(R5_16MM, R5_16MM, names=("k0",))


def test_report_is_relative_to_reference():
    a = parameter_report(LIFCAL_16, REF_16)["B"]["rel_dev"]
    b = parameter_report(REF_16, LIFCAL_16)["B"]["rel_dev"]
    assert a == pytest.approx(0.001 / 0.376) and b == pytest.approx(0.001 / 0.375)


def test_markdown_table_matches_numbers():
    rep = parameter_report(LIFCAL_16, REF_16)
    md = markdown_table(rep).splitlines()
    assert md[0].startswith("| | f_L [mm]")
    cells = [c.strip() for c in md[4].split("|")[2:-1]]
    assert [float(c) for c in cells] == [round(rep[n]["rel_dev_pct"], 3) for n in rep]


def _traj(n=20):
    return winding_trajectory(n, (300.0, 150.0, 150.0), (0.0, 0.0, 1500.0))


def test_identical_trajectories():
    t = _traj()
    for mode in ("rigid", "similarity"):
        e = trajectory_rmse(t, t, mode)
        assert e.rmse < 1e-9 and e.scale == pytest.approx(1.0, abs=1e-12)


def test_similarity_recovers_published_scale():
    gt = _traj()
    est = [Pose(p.rotation, p.translation / 1.057) for p in gt]  # estimate 1.057x too small
    e = trajectory_rmse(est, gt, "similarity")
    assert e.scale == pytest.approx(1.057, rel=1e-12)
    assert e.rmse < 1e-9
    assert trajectory_rmse(est, gt, "rigid").rmse > 1.0


def test_length_mismatch():
    t = _traj()
    with pytest.raises(LengthMismatch):
        trajectory_rmse(t[:-1], t)


@given(st.floats(-np.pi, np.pi), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1),
       st.floats(-2000, 2000), st.floats(0.2, 5.0))
def test_alignment_invariance(angle, ax, ay, az, shift, s):
    gt = _traj(12)
    rng = np.random.default_rng(0)
    est = np.array([p.center() for p in gt]) + rng.normal(0, 5.0, (12, 3))
    axis = np.array([ax, ay, az + 2.0])
    R = Rotation.from_rotvec(angle * axis / np.linalg.norm(axis)).as_matrix()
    moved = est @ R.T + [shift, -shift / 2, 3.0]
    for mode in ("rigid", "similarity"):
        assert trajectory_rmse(moved, gt, mode).rmse == pytest.approx(trajectory_rmse(est, gt, mode).rmse, abs=1e-9)
    scaled = s * moved
    assert trajectory_rmse(scaled, gt, "similarity").rmse == pytest.approx(
        trajectory_rmse(est, gt, "similarity").rmse, abs=1e-9)


def test_umeyama_reflection_guard():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(10, 3))
    dst = src * [1, 1, -1]  # a mirror image has no proper rotation fit
    _, R, _ = umeyama(src, dst)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_trajectory_extent():
    pts = np.array([[0.0, 0, 0], [3.0, 4.0, 0], [1.0, 1.0, 1.0]])
    assert trajectory_extent(pts) == 5.0
    assert trajectory_extent(pts[:1]) == 0.0


def test_timestamp_association():
    pairs = associate([0.0, 1.0, 2.01, 5.0], [0.005, 1.0, 2.0, 3.0])
    assert pairs.tolist() == [[0, 0], [1, 1], [2, 2]]
    assert associate([0.0, 0.001], [0.0]).tolist() == [[0, 0]]
    assert associate([], [1.0]).shape == (0, 2)


def test_sweep_records_failures(small_clean, tmp_path):
    cells, runs = robustness_sweep(small_clean, [200, 6], [8], repeats=1, seed=1)
    full, tiny = cells
    assert full["failures"] == 0 and full["rmse_pct_f_L"] < 1e-4
    assert tiny["failures"] == 1 and np.isnan(tiny["rmse_pct_f_L"])
    bad = [r for r in runs if r["status"] == "failed"][0]
    assert bad["stage"] and bad["message"]
    write_sweep_csv(tmp_path / "s.csv", cells)
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [int(r["num_points"]) for r in rows] == [200, 6]


def test_sweep_full_cell_equals_single_run(small_clean):
    from plencal.pipeline import CalibrationInput, calibrate
    from plencal.evaluation import relative_errors

    cells, runs = robustness_sweep(small_clean, [10_000], [100], repeats=1)
    single = calibrate(CalibrationInput.from_synthetic(small_clean))
    assert runs[0]["errors"] == relative_errors(single.intrinsics, small_clean.intrinsics_gt)
