import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plencal.downstream import (backproject_virtual, build_undistortion_map, central_perspective_project,
                                equivalent_focal_px, export_point_cloud, export_rgbd_frame, metric_depth, read_ply,
                                write_ply)
from plencal.errors import NonFiniteDepth
from plencal.model import DistortionCoeffs, VirtualPoint, distort, main_lens_image_distance, project_to_virtual
from plencal.synthgen import R5_16MM

# 100 * (2B + b_L0) / (4B + b_L0) = 100 * 16.645 / 17.397
PROJ_V4 = 95.6774156463758


@given(st.floats(-800, 800), st.floats(-800, 800), st.floats(300, 20000))
def test_metric_depth_inverts_projection(x, y, z):
    vp = project_to_virtual(R5_16MM, (x, y, z))
    assert metric_depth(R5_16MM, vp.v) == pytest.approx(z, rel=1e-9)


def test_metric_depth_examples():
    assert metric_depth(R5_16MM, 2.4232) == pytest.approx(5000.0, rel=5e-3)
    assert metric_depth(R5_16MM, 2.42363734543951825) == pytest.approx(5000.0, rel=1e-12)
    v_focal = (R5_16MM.f_L - R5_16MM.b_L0) / R5_16MM.B
    with pytest.raises(NonFiniteDepth):
        metric_depth(R5_16MM, v_focal)
    with pytest.raises(NonFiniteDepth):
        metric_depth(R5_16MM, np.array([3.0, 2.0]))


def test_metric_depth_decreases_with_virtual_depth():
    v = np.linspace(2.3, 30, 500)
    assert np.all(np.diff(metric_depth(R5_16MM, v)) < 0)


def test_central_projection_examples():
    c_x, c_y = R5_16MM.c_x, R5_16MM.c_y
    assert central_perspective_project(R5_16MM, VirtualPoint(c_x + 37.0, c_y - 5.0, 2.0)) == (c_x + 37.0, c_y - 5.0)
    for v in (1.5, 3.0, 12.0):
        assert central_perspective_project(R5_16MM, VirtualPoint(c_x, c_y, v)) == (c_x, c_y)
    xp, _ = central_perspective_project(R5_16MM, VirtualPoint(c_x + 100.0, c_y, 4.0))
    assert xp - c_x == pytest.approx(PROJ_V4, rel=1e-12)
    assert round(xp - c_x, 3) == 95.677  # 95.678 when rounded by hand


def test_central_projection_custom_plane():
    c_x = R5_16MM.c_x
    xp, _ = central_perspective_project(R5_16MM, VirtualPoint(c_x + 50.0, R5_16MM.c_y, 3.0), plane_v=3.0)
    assert xp == c_x + 50.0
    with pytest.raises(ValueError):
        central_perspective_project(R5_16MM.with_values(b_L0=0.1, B=0.05), VirtualPoint(0.0, 0.0, -10.0))


def test_rgbd_frame_is_a_pinhole_view(small_clean):
    ds = small_clean
    intr = ds.intrinsics_gt
    X = ds.poses_gt[2].transform(ds.points_gt)
    X = X[X[:, 2] > 100]
    vps = [project_to_virtual(intr, x) for x in X]
    frame = export_rgbd_frame(intr, VirtualPoint(*(np.array(a) for a in zip(*vps))))
    assert frame["fx"] == pytest.approx((2 * intr.B + intr.b_L0) / intr.s_x, rel=1e-15)
    np.testing.assert_allclose(frame["depth"], X[:, 2], rtol=1e-9)
    # back-project with the equivalent pinhole and compare ray directions
    rays = np.stack([(frame["x"] - frame["cx"]) / frame["fx"], (frame["y"] - frame["cy"]) / frame["fy"],
                     np.ones(len(X))], axis=1)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    dirs = X / np.linalg.norm(X, axis=1, keepdims=True)
    assert np.max(np.abs(rays - dirs)) < 1e-9
    assert equivalent_focal_px(intr) == (frame["fx"], frame["fy"])


def test_rgbd_frame_empty():
    frame = export_rgbd_frame(R5_16MM, VirtualPoint(np.zeros(0), np.zeros(0), np.zeros(0)))
    assert len(frame["x"]) == len(frame["depth"]) == 0
    assert frame["fx"] > 0


def test_rgbd_depths_within_propagated_noise(small_noisy):
    from plencal.model import micro_lens_centers
    from plencal.sfm import virtual_track_centroids

    ds = small_noisy
    intr = ds.intrinsics_gt
    obs = ds.observations
    cm = virtual_track_centroids(obs, ds.grid, intr)
    frame = export_rgbd_frame(intr, VirtualPoint(cm.xy[:, 0], cm.xy[:, 1], cm.v))
    z = np.array([ds.poses_gt[j].transform(ds.points_gt[i])[2] for i, j in zip(cm.point, cm.view)])
    # w = 1 - 1/v is a slope fit over the lens centers: var(w) = sigma^2 / sum |dc|^2,
    # then dv = v^2 dw and dz = z^2 B / b_L^2 dv
    c = micro_lens_centers(intr, ds.grid)[obs.lens_ids]
    pp, pv, starts, counts = obs.pair_groups()
    pair = np.repeat(np.arange(len(starts)), counts)
    m = cm.obs_inlier.astype(float)
    n = np.add.reduceat(m, starts)
    cbar = np.add.reduceat(c * m[:, None], starts) / np.maximum(n, 1)[:, None]
    ssq = np.add.reduceat(m * np.sum((c - cbar[pair]) ** 2, axis=1), starts)
    lookup = {(p, q): k for k, (p, q) in enumerate(zip(pp, pv))}
    k = np.array([lookup[(p, q)] for p, q in zip(cm.point, cm.view)])
    b_L = cm.v * intr.B + intr.b_L0
    sigma_z = z ** 2 * intr.B / b_L ** 2 * cm.v ** 2 * 0.2 / np.sqrt(ssq[k])
    t = (frame["depth"] - z) / sigma_z
    assert len(t) > 1000
    assert abs(np.mean(t)) < 0.2
    assert 0.8 < np.std(t) < 1.25
    assert np.mean(np.abs(t) < 4) > 0.99


def test_rgbd_depths_exact_without_noise(small_clean):
    from plencal.sfm import virtual_track_centroids

    ds = small_clean
    cm = virtual_track_centroids(ds.observations, ds.grid, ds.intrinsics_gt)
    frame = export_rgbd_frame(ds.intrinsics_gt, VirtualPoint(cm.xy[:, 0], cm.xy[:, 1], cm.v))
    z = np.array([ds.poses_gt[j].transform(ds.points_gt[i])[2] for i, j in zip(cm.point, cm.view)])
    np.testing.assert_allclose(frame["depth"], z, rtol=1e-8)


def test_point_cloud_passthrough_and_lift(small_clean):
    ds = small_clean
    intr = ds.intrinsics_gt
    np.testing.assert_array_equal(export_point_cloud(intr, ds.poses_gt, points=ds.points_gt), ds.points_gt)
    rows = []
    for j in (1, 5):
        X = ds.poses_gt[j].transform(ds.points_gt[:40])
        for x in X:
            vp = project_to_virtual(intr, x)
            rows.append((j, vp.x, vp.y, vp.v))
    cloud = export_point_cloud(intr, ds.poses_gt, depth_samples=rows)
    # both views reproduce the same world points
    np.testing.assert_allclose(cloud[:40], ds.points_gt[:40], rtol=1e-9, atol=1e-7)
    np.testing.assert_allclose(cloud[40:], cloud[:40], rtol=1e-9, atol=1e-7)
    for c in ds.scale_constraints:
        if c.point_a < 40 and c.point_b < 40:
            assert np.linalg.norm(cloud[c.point_a] - cloud[c.point_b]) == pytest.approx(c.distance, rel=1e-9)
    assert export_point_cloud(intr, ds.poses_gt).shape == (0, 3)


def test_backproject_matches_thin_lens():
    X = np.array([120.0, -40.0, 2500.0])
    vp = project_to_virtual(R5_16MM, X)
    assert main_lens_image_distance(R5_16MM, X[2]) == pytest.approx(vp.v * R5_16MM.B + R5_16MM.b_L0)
    np.testing.assert_allclose(backproject_virtual(R5_16MM, vp)[0], X, rtol=1e-10)


def test_ply_header_and_round_trip(tmp_path):
    pts = np.array([[1.5, -2.25, 1000.0], [0.0, 0.0, 3.0]])
    write_ply(tmp_path / "a.ply", pts)
    text = (tmp_path / "a.ply").read_text().splitlines()
    assert text[:7] == ["ply", "format ascii 1.0", "element vertex 2", "property float x", "property float y",
                        "property float z", "end_header"]
    np.testing.assert_allclose(read_ply(tmp_path / "a.ply"), pts)
    write_ply(tmp_path / "c.ply", pts, colors=[[255, 0, 10], [1, 2, 3]])
    lines = (tmp_path / "c.ply").read_text().splitlines()
    assert "property uchar red" in lines and lines[-1].endswith(" 1 2 3")
    write_ply(tmp_path / "e.ply", np.zeros((0, 3)))
    assert "element vertex 0" in (tmp_path / "e.ply").read_text()
    assert read_ply(tmp_path / "e.ply").shape == (0, 3)


def test_undistortion_map_identity():
    lut = build_undistortion_map(R5_16MM, 2048, 2048, step=32.0)
    pts = np.random.default_rng(0).uniform(0, 2048, (500, 2))
    out, clamped = lut(pts)
    np.testing.assert_allclose(out, pts, atol=1e-9)
    assert not clamped.any()


def test_undistortion_map_accuracy():
    intr = R5_16MM.with_values(distortion=DistortionCoeffs(k0=5e-9, k1=-1e-15, p0=2e-7, p1=-1e-7))
    lut = build_undistortion_map(intr, 2048, 2048, step=8.0)
    rng = np.random.default_rng(7)
    und = rng.uniform(40, 2008, (10_000, 2))
    dist = distort(intr.distortion, intr.principal, und)
    out, clamped = lut(dist)
    assert not clamped.any()
    assert np.max(np.linalg.norm(out - und, axis=1)) < 0.01


def test_undistortion_map_clamps_outside_queries():
    lut = build_undistortion_map(R5_16MM, 100, 60, step=8.0)
    out, clamped = lut(np.array([[-5.0, 10.0], [50.0, 30.0], [300.0, 500.0]]))
    assert clamped.tolist() == [True, False, True]
    np.testing.assert_allclose(out[0], [0.0, 10.0])
    assert lut.xs[-1] >= 100 and lut.ys[-1] >= 60
    json.dumps(out.tolist())
