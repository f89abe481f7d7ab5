"""Preintegration, stationary detection, and bias segmentation tests."""

import numpy as np
import pytest

from pgslam.geometry import compose, inverse, se3_log, so3_log_matrix
from pgslam.imu import (
    ImuBias,
    ImuNoise,
    ImuSample,
    Preintegrated,
    StationaryInterval,
    assign_bias_segments,
    detect_stationary_icp,
    detect_stationary_imu,
    intersect_intervals,
    intervals_to_pose_indices,
    preintegrate,
)
from pgslam.sim import (
    GRAVITY,
    TrajectoryBuilder,
    generate_trajectory,
    simulate_imu,
)

NOISE = ImuNoise()


def wiggle_trajectory():
    """Short path with simultaneous acceleration and rotation."""
    b = TrajectoryBuilder(0.0, 0.0, 1.0, 0.0)
    b.move_to(1.2, 0.6)
    b.turn_to(50.0, duration=1.0)
    b.move_to(0.4, 1.4)
    return generate_trajectory(b.build())


def true_deltas(traj, t0, t1):
    """Analytic relative-motion deltas between two instants on a trajectory."""
    g = GRAVITY
    dt = t1 - t0
    Ri = traj.pose(t0).rotation_matrix()
    Rj = traj.pose(t1).rotation_matrix()
    vi, vj = traj.velocity(t0), traj.velocity(t1)
    pi, pj = traj.pose(t0).trans, traj.pose(t1).trans
    dR = Ri.T @ Rj
    dv = Ri.T @ (vj - vi - g * dt)
    dp = Ri.T @ (pj - pi - vi * dt - 0.5 * g * dt**2)
    return dR, dv, dp


class TestPreintegrationAccuracy:
    def test_fine_step_matches_trajectory(self):
        # oracle: closed-form relative motion of the continuous trajectory,
        # with measurements sampled every 10 microseconds
        traj = wiggle_trajectory()
        samples = simulate_imu(traj, rate=1e5)
        times = np.array([s.timestamp for s in samples])
        for t0, t1 in ((0.2, 0.45), (1.5, 1.75)):
            lo, hi = np.searchsorted(times, (t0 - 1e-12, t1 + 1e-12))
            pre = preintegrate(samples[lo:hi], ImuBias(), NOISE)
            dR, dv, dp = true_deltas(traj, times[lo], times[hi - 1])
            assert np.linalg.norm(
                so3_log_matrix(pre.delta_rotation_matrix.T @ dR)) < 1e-6
            assert np.linalg.norm(pre.delta_velocity - dv) < 1e-6
            assert np.linalg.norm(pre.delta_position - dp) < 1e-6

    def test_composition_property(self):
        # integrating an interval at once must equal chaining its halves:
        # dR = dR1 dR2, dv = dv1 + dR1 dv2, dp = dp1 + dv1 T2 + dR1 dp2
        traj = wiggle_trajectory()
        samples = simulate_imu(traj, rate=1000.0)[:1001]
        whole = preintegrate(samples, ImuBias(), NOISE)
        for split in (137, 500, 880):
            a = preintegrate(samples[: split + 1], ImuBias(), NOISE)
            b = preintegrate(samples[split:], ImuBias(), NOISE)
            Ra, Rb = a.delta_rotation_matrix, b.delta_rotation_matrix
            dR = Ra @ Rb
            dv = a.delta_velocity + Ra @ b.delta_velocity
            dp = (a.delta_position + a.delta_velocity * b.duration
                  + Ra @ b.delta_position)
            assert np.linalg.norm(
                so3_log_matrix(whole.delta_rotation_matrix.T @ dR)) < 1e-9
            assert np.linalg.norm(whole.delta_velocity - dv) < 1e-9
            assert np.linalg.norm(whole.delta_position - dp) < 1e-9
            assert abs(whole.duration - (a.duration + b.duration)) < 1e-12

    def test_bias_jacobian_first_order(self):
        # oracle: re-integrating at the shifted bias
        traj = wiggle_trajectory()
        samples = simulate_imu(traj, rate=500.0)[:251]
        b0 = ImuBias(np.array([0.002, -0.001, 0.003]),
                     np.array([0.05, 0.02, -0.04]))
        pre = preintegrate(samples, b0, NOISE)
        rng = np.random.default_rng(17)
        for _ in range(20):
            db = rng.normal(size=6)
            db *= rng.uniform(0.1, 1.0) * 1e-3 / np.linalg.norm(db)
            shifted = ImuBias.from_vector(b0.as_vector() + db)
            exact = preintegrate(samples, shifted, NOISE)
            dR_c, dv_c, dp_c = pre.corrected_deltas(shifted)
            assert np.linalg.norm(
                so3_log_matrix(exact.delta_rotation_matrix.T @ dR_c)) < 1e-6
            assert np.linalg.norm(exact.delta_velocity - dv_c) < 1e-6
            assert np.linalg.norm(exact.delta_position - dp_c) < 1e-6

    def test_covariance_matches_monte_carlo(self):
        # scatter of noisy re-integrations should follow the predicted 9x9
        traj = wiggle_trajectory()
        clean = simulate_imu(traj, rate=200.0)[:101]
        pre = preintegrate(clean, ImuBias(), NOISE)
        devs = []
        for trial in range(300):
            noisy = simulate_imu(traj, noise=NOISE, rate=200.0,
                                 seed=1000 + trial)[:101]
            p = preintegrate(noisy, ImuBias(), NOISE)
            th = so3_log_matrix(pre.delta_rotation_matrix.T
                                @ p.delta_rotation_matrix)
            devs.append(np.concatenate([
                th, p.delta_velocity - pre.delta_velocity,
                p.delta_position - pre.delta_position]))
        sample_var = np.var(np.array(devs), axis=0)
        predicted = np.diag(pre.covariance)
        ratio = sample_var / predicted
        assert np.all(ratio > 0.5) and np.all(ratio < 2.0)

    def test_identity_element(self):
        pre = Preintegrated.identity()
        assert pre.duration == 0.0
        assert np.allclose(pre.delta_rotation_matrix, np.eye(3))

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            preintegrate([ImuSample(0.0, np.zeros(3), np.zeros(3))],
                         ImuBias(), NOISE)

    def test_non_monotonic_rejected(self):
        s = [ImuSample(0.0, np.zeros(3), np.zeros(3)),
             ImuSample(0.0, np.zeros(3), np.zeros(3))]
        with pytest.raises(ValueError):
            preintegrate(s, ImuBias(), NOISE)


def rest_motion_rest():
    """2 s rest, vigorous turn-and-dash, 2 s rest."""
    b = TrajectoryBuilder(0.0, 0.0, 1.0, 0.0)
    b.rest(duration=2.0)
    b.turn_to(175.0, duration=1.5)
    b.move_to(-2.0, 0.8, speed=2.0)
    b.rest(duration=2.0)
    return generate_trajectory(b.build())


class TestStationaryImu:
    def test_rests_found_within_one_window(self):
        traj = rest_motion_rest()
        samples = simulate_imu(traj, noise=ImuNoise(), seed=2)
        intervals = detect_stationary_imu(samples, window=0.5)
        assert len(intervals) == 2
        (a0, a1), (b0, b1) = intervals
        assert a0 <= 0.5 and abs(a1 - 2.0) <= 0.5
        assert abs(b0 - (traj.times[-1] - 2.0)) <= 0.5
        assert b1 >= traj.times[-1] - 0.5

    def test_moving_sensor_not_flagged(self):
        traj = rest_motion_rest()
        samples = simulate_imu(traj, noise=ImuNoise(), seed=3)
        intervals = detect_stationary_imu(samples, window=0.5)
        for t in (2.8, 3.5, 4.2):
            assert not any(t0 <= t <= t1 for t0, t1 in intervals)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            detect_stationary_imu([])

    def test_indices_conversion(self):
        stamps = np.arange(0.0, 8.0, 0.5)
        out = intervals_to_pose_indices([(1.0, 2.2), (5.9, 7.1)], stamps)
        assert [(iv.start_index, iv.end_index) for iv in out] == [(2, 4), (12, 14)]


class TestStationaryIcp:
    def test_held_poses_flagged(self):
        traj = rest_motion_rest()
        stamps = np.arange(0.0, traj.times[-1], 0.5)
        poses = [traj.pose(t) for t in stamps]
        out = detect_stationary_icp(poses, 0.01, 0.5)
        flagged = set()
        for iv in out:
            flagged |= set(range(iv.start_index, iv.end_index + 1))
        assert {0, 1, 2, 3} <= flagged          # first rest spans 0..2 s
        assert 8 not in flagged                  # mid-motion pose

    def test_thresholds_gate_motion(self):
        from pgslam.geometry import Pose3, se3_exp
        poses = [Pose3.identity(),
                 se3_exp(np.array([0, 0, 0, 0.05, 0, 0])),
                 se3_exp(np.array([0, 0, 0, 0.105, 0, 0]))]
        assert detect_stationary_icp(poses, 0.01, 0.5) == []
        out = detect_stationary_icp(poses, 0.1, 0.5)
        assert [(iv.start_index, iv.end_index) for iv in out] == [(0, 2)]


class TestIntervalAlgebra:
    def test_intersection(self):
        a = [StationaryInterval(0, 10), StationaryInterval(20, 30)]
        b = [StationaryInterval(5, 25)]
        out = intersect_intervals(a, b)
        assert [(iv.start_index, iv.end_index) for iv in out] == [(5, 10), (20, 25)]

    def test_min_length_filter(self):
        a = [StationaryInterval(0, 3), StationaryInterval(10, 20)]
        b = [StationaryInterval(2, 14)]
        out = intersect_intervals(a, b, min_length=2)
        assert [(iv.start_index, iv.end_index) for iv in out] == [(10, 14)]

    def test_disjoint(self):
        a = [StationaryInterval(0, 2)]
        b = [StationaryInterval(5, 8)]
        assert intersect_intervals(a, b) == []

    def test_invalid_interval_rejected(self):
        with pytest.raises(ValueError):
            StationaryInterval(5, 2)


class TestBiasSegments:
    def test_three_rests_make_four_segments(self):
        intervals = [StationaryInterval(40, 48), StationaryInterval(93, 101),
                     StationaryInterval(135, 143)]
        ids = assign_bias_segments(intervals, 200)
        assert ids.max() == 3 and ids.min() == 0
        assert ids[39] == 0 and ids[40] == 1
        assert ids[92] == 1 and ids[93] == 2
        assert ids[134] == 2 and ids[135] == 3 and ids[199] == 3

    def test_rest_at_origin_opens_no_segment(self):
        ids = assign_bias_segments([StationaryInterval(0, 5)], 20)
        assert np.all(ids == 0)

    def test_no_rests_single_segment(self):
        ids = assign_bias_segments([], 50)
        assert np.all(ids == 0)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            assign_bias_segments([StationaryInterval(0, 10),
                                  StationaryInterval(5, 15)], 20)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            assign_bias_segments([StationaryInterval(10, 25)], 20)
