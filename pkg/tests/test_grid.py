import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevmotion.exceptions import ContractError
from bevmotion.grid import (
    GridSpec,
    SceneTruth,
    TrackState,
    rasterize_labels,
    voxelize,
)

from conftest import random_grid_spec


def brute_force_voxelize(points, spec):
    """Independent per-point oracle: scalar loop, explicit floor binning."""
    cells = np.zeros((spec.H, spec.W, spec.C), dtype=np.uint8)
    dropped = 0
    for x, y, z in np.asarray(points, dtype=np.float64).reshape(-1, 3):
        i = math.floor((x - spec.x_range[0]) / spec.xy_resolution)
        j = math.floor((y - spec.y_range[0]) / spec.xy_resolution)
        k = math.floor((z - spec.z_range[0]) / spec.z_resolution)
        if 0 <= i < spec.H and 0 <= j < spec.W and 0 <= k < spec.C:
            cells[i, j, k] = 1
        else:
            dropped += 1
    return cells, dropped


class TestGridSpec:
    def test_default_dimensions(self, default_spec):
        assert (default_spec.H, default_spec.W, default_spec.C) == (256, 256, 13)

    def test_partial_top_bin_rounds_up(self):
        # 5 m z extent at 0.4 m -> 12.5 bins -> 13
        spec = GridSpec()
        assert spec.C == math.ceil((2.0 - (-3.0)) / 0.4)

    def test_exact_bin_count_not_inflated(self):
        spec = GridSpec(z_range=(-2.0, 2.0), z_resolution=0.4)
        assert spec.C == 10

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"xy_resolution": 0.0},
            {"z_resolution": -0.1},
            {"x_range": (3.0, 3.0)},
            {"y_range": (5.0, -5.0)},
            {"frame_interval": 0.0},
            {"input_frames": 0},
        ],
    )
    def test_invalid_specs_rejected(self, kwargs):
        with pytest.raises(ContractError):
            GridSpec(**kwargs)

    def test_horizon(self, default_spec):
        assert default_spec.horizon_seconds == pytest.approx(1.0)

    def test_cell_centers_corner(self, small_spec):
        centers = small_spec.cell_centers()
        assert centers.shape == (64, 64, 2)
        assert centers[0, 0] == pytest.approx([-15.75, -15.75])


class TestVoxelize:
    def test_lower_corner_point(self, default_spec):
        grid = voxelize(np.array([[-32.0, -32.0, -3.0]]), default_spec)
        assert grid.cells[0, 0, 0] == 1
        assert grid.cells.sum() == 1
        assert grid.dropped_points == 0

    def test_origin_point(self, default_spec):
        # floor((0+32)/0.25) = 128, floor((0+3)/0.4) = 7; cross-checked by oracle
        grid = voxelize(np.array([[0.0, 0.0, 0.0]]), default_spec)
        assert grid.cells[128, 128, 7] == 1
        oracle, _ = brute_force_voxelize([[0.0, 0.0, 0.0]], default_spec)
        assert np.array_equal(grid.cells, oracle)

    def test_upper_corner_just_inside(self, default_spec):
        pt = [[31.99, 31.99, 1.99]]
        grid = voxelize(np.array(pt), default_spec)
        assert grid.cells[255, 255, 12] == 1
        oracle, _ = brute_force_voxelize(pt, default_spec)
        assert np.array_equal(grid.cells, oracle)

    def test_out_of_range_dropped_and_counted(self, default_spec):
        pts = np.array([[100.0, 0.0, 0.0], [0.0, 0.0, 5.0], [0.0, 0.0, 0.0]])
        grid = voxelize(pts, default_spec)
        assert grid.dropped_points == 2
        assert grid.cells.sum() == 1

    def test_matches_oracle_on_random_points(self, default_spec):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-40, 40, size=(1000, 3))
        grid = voxelize(pts, default_spec)
        oracle, dropped = brute_force_voxelize(pts, default_spec)
        assert np.array_equal(grid.cells, oracle)
        assert grid.dropped_points == dropped

    def test_random_specs_match_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            spec = random_grid_spec(rng)
            pts = rng.uniform(-45, 45, size=(200, 3))
            grid = voxelize(pts, spec)
            oracle, dropped = brute_force_voxelize(pts, spec)
            assert np.array_equal(grid.cells, oracle)
            assert grid.dropped_points == dropped

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariant(self, seed):
        spec = GridSpec(x_range=(-8, 8), y_range=(-8, 8), z_range=(-1, 1), xy_resolution=0.5, z_resolution=0.5)
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-9, 9, size=(50, 3))
        perm = rng.permutation(50)
        a = voxelize(pts, spec)
        b = voxelize(pts[perm], spec)
        assert np.array_equal(a.cells, b.cells)
        assert a.dropped_points == b.dropped_points

    def test_occupancy_bounded_by_point_count(self, small_spec):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-16, 16, size=(300, 3))
        grid = voxelize(pts, small_spec)
        assert grid.cells.sum() <= 300

    def test_rejects_non_finite(self, small_spec):
        with pytest.raises(ContractError):
            voxelize(np.array([[np.nan, 0.0, 0.0]]), small_spec)


def _single_track(spec, velocity, category=1, instance_id=1, size=(4.5, 1.9)):
    """Constant-velocity track through the origin, future poses only."""
    vx, vy = velocity
    heading = math.atan2(vy, vx) if (vx or vy) else 0.0
    current = np.array([0.0, 0.0, heading])
    future = np.array(
        [[vx * (t + 1) * spec.frame_interval, vy * (t + 1) * spec.frame_interval, heading]
         for t in range(spec.output_steps)]
    )
    return TrackState(instance_id=instance_id, category=category, current_pose=current, future_poses=future)


def _rectangle_points(center, size, n=200, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.zeros((n, 3))
    pts[:, 0] = rng.uniform(center[0] - size[0] / 2, center[0] + size[0] / 2, n)
    pts[:, 1] = rng.uniform(center[1] - size[1] / 2, center[1] + size[1] / 2, n)
    pts[:, 2] = rng.uniform(-0.5, 0.5, n)
    return pts


class TestRasterizeLabels:
    def test_empty_scene(self, small_spec):
        truth = SceneTruth(current_points=np.zeros((0, 3)), point_instance=np.zeros(0, dtype=np.int32))
        labels = rasterize_labels(truth, small_spec)
        assert labels.valid.sum() == 0
        assert np.all(labels.motion == 0)
        assert np.all(labels.category == 0)

    def test_translating_car_closed_form(self, small_spec):
        # +1 m/s along x for 1.0 s -> per-step displacement (0.2 * tau, 0)
        track = _single_track(small_spec, (1.0, 0.0))
        pts = _rectangle_points((0.0, 0.0), (4.5, 1.9))
        truth = SceneTruth(current_points=pts, point_instance=np.ones(len(pts), dtype=np.int32), tracks=[track])
        labels = rasterize_labels(truth, small_spec)
        mask = labels.instance_id == 1
        assert mask.sum() > 0
        for t in range(small_spec.output_steps):
            expected = np.array([0.2 * (t + 1), 0.0], dtype=np.float32)
            assert np.allclose(labels.motion[t][mask], expected, atol=1e-6)
        assert np.all(labels.state[mask] == 1)
        assert np.all(labels.category[mask] == 1)

    def test_stationary_pedestrian(self, small_spec):
        track = _single_track(small_spec, (0.0, 0.0), category=2)
        pts = _rectangle_points((2.0, 2.0), (0.6, 0.6))
        truth = SceneTruth(current_points=pts, point_instance=np.ones(len(pts), dtype=np.int32), tracks=[track])
        labels = rasterize_labels(truth, small_spec)
        mask = labels.instance_id == 1
        assert mask.sum() > 0
        assert np.all(labels.motion[:, mask] == 0)
        assert np.all(labels.state[mask] == 0)
        assert np.all(labels.category[mask] == 2)

    def test_overlap_resolves_to_smaller_instance(self, small_spec):
        t1 = _single_track(small_spec, (1.0, 0.0), instance_id=1)
        t2 = _single_track(small_spec, (0.0, 1.0), instance_id=2, category=3)
        pts = _rectangle_points((0.0, 0.0), (2.0, 2.0))
        # every point reported by both objects at the same location
        truth = SceneTruth(
            current_points=np.vstack([pts, pts]),
            point_instance=np.concatenate([np.ones(len(pts)), np.full(len(pts), 2)]).astype(np.int32),
            tracks=[t1, t2],
        )
        labels = rasterize_labels(truth, small_spec)
        occupied = labels.valid == 1
        assert np.all(labels.instance_id[occupied] == 1)

    def test_background_clutter_is_valid_but_static(self, small_spec):
        pts = _rectangle_points((5.0, -5.0), (3.0, 3.0))
        truth = SceneTruth(current_points=pts, point_instance=np.zeros(len(pts), dtype=np.int32))
        labels = rasterize_labels(truth, small_spec)
        assert labels.valid.sum() > 0
        assert np.all(labels.motion == 0)
        assert np.all(labels.state == 0)
        assert np.all(labels.instance_id == 0)

    def test_instance_cells_partition_nonbackground(self, small_spec):
        t1 = _single_track(small_spec, (2.0, 0.0), instance_id=1)
        t2 = _single_track(small_spec, (0.0, 2.0), instance_id=2, category=3)
        p1 = _rectangle_points((-5.0, 0.0), (4.5, 1.9), seed=1)
        p2 = _rectangle_points((5.0, 0.0), (1.8, 0.6), seed=2)
        clutter = _rectangle_points((0.0, 8.0), (2.0, 2.0), seed=3)
        truth = SceneTruth(
            current_points=np.vstack([p1, p2, clutter]),
            point_instance=np.concatenate(
                [np.ones(len(p1)), np.full(len(p2), 2), np.zeros(len(clutter))]
            ).astype(np.int32),
            tracks=[t1, t2],
        )
        labels = rasterize_labels(truth, small_spec)
        n_instance_cells = sum(int((labels.instance_id == i).sum()) for i in (1, 2))
        n_nonbackground = int(((labels.category != 0) & (labels.valid == 1)).sum())
        assert n_instance_cells == n_nonbackground

    def test_validate_passes(self, small_spec):
        track = _single_track(small_spec, (1.0, 1.0))
        pts = _rectangle_points((0.0, 0.0), (4.5, 1.9))
        truth = SceneTruth(current_points=pts, point_instance=np.ones(len(pts), dtype=np.int32), tracks=[track])
        labels = rasterize_labels(truth, small_spec)
        labels.validate(small_spec)
