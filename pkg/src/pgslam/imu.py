"""IMU preintegration, stationary-interval detection, and bias segmentation.

Preintegrated deltas follow the body-frame convention: with R_i the world
rotation at the start of the interval and gravity g,

    R_j = R_i * dR,   v_j = v_i + g*dt + R_i * dv,   p_j = p_i + v_i*dt
                                        + 0.5*g*dt^2 + R_i * dp

so gravity never enters the accumulation here; the factor residual owns it.
Each sample interval is integrated in closed form (constant averaged rates
over the interval), which keeps the deltas accurate to O(dt^2) in the
measurement sampling rather than O(dt) of a plain Euler loop.

Bias handling is first order: ``bias_jacobians`` maps a bias change db
(gyro stacked over accel) to a correction of the 9-vector (theta, dv, dp),
valid near ``linearization_bias``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import (
    canonical_quat,
    inverse,
    quat_from_rotvec,
    quat_mul,
    quat_to_matrix,
    rotation_angle,
    skew,
    so3_exp,
    so3_left_jacobian,
    so3_right_jacobian,
)


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    angular_velocity: np.ndarray
    linear_acceleration: np.ndarray


@dataclass(frozen=True)
class ImuBias:
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.gyro_bias, self.accel_bias])

    @classmethod
    def from_vector(cls, v) -> "ImuBias":
        v = np.asarray(v, dtype=float)
        return cls(v[:3].copy(), v[3:6].copy())


@dataclass(frozen=True)
class ImuNoise:
    gyro_noise_density: float = 1.7e-4      # rad/s/sqrt(Hz)
    accel_noise_density: float = 2.0e-3     # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 1.9e-5
    accel_bias_walk: float = 3.0e-3

    def __post_init__(self):
        for v in (self.gyro_noise_density, self.accel_noise_density,
                  self.gyro_bias_walk, self.accel_bias_walk):
            if v <= 0:
                raise ValueError("noise densities must be positive")


@dataclass
class Preintegrated:
    """Relative IMU deltas over one inter-pose interval."""

    delta_rotation: np.ndarray      # unit quaternion (x, y, z, w)
    delta_velocity: np.ndarray
    delta_position: np.ndarray
    covariance: np.ndarray          # 9x9 over (theta, dv, dp)
    bias_jacobians: np.ndarray      # 9x6, columns (gyro bias, accel bias)
    duration: float
    linearization_bias: ImuBias

    @classmethod
    def identity(cls, bias: ImuBias | None = None) -> "Preintegrated":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3), np.zeros(3),
                   np.zeros((9, 9)), np.zeros((9, 6)), 0.0,
                   bias if bias is not None else ImuBias())

    @property
    def delta_rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.delta_rotation)

    def corrected_deltas(self, bias: ImuBias):
        """First-order deltas at a nearby bias; returns (dR matrix, dv, dp)."""
        db = bias.as_vector() - self.linearization_bias.as_vector()
        corr = self.bias_jacobians @ db
        dR = self.delta_rotation_matrix @ so3_exp(corr[0:3])
        return dR, self.delta_velocity + corr[3:6], self.delta_position + corr[6:9]


@dataclass(frozen=True)
class StationaryInterval:
    start_index: int
    end_index: int      # inclusive

    def __post_init__(self):
        if self.start_index > self.end_index:
            raise ValueError("interval start must not exceed end")


def _gamma2(phi: np.ndarray) -> np.ndarray:
    """Double integral of Exp: int_0^1 int_0^s Exp(u*phi) du ds."""
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
    else:
        c1 = (theta - np.sin(theta)) / theta**3
        c2 = (0.5 * theta * theta + np.cos(theta) - 1.0) / theta**4
    return 0.5 * np.eye(3) + c1 * K + c2 * (K @ K)


def _matrix_series_dir(phi: np.ndarray, a: np.ndarray, coeffs) -> np.ndarray:
    """d(M(phi) a)/d phi for M(phi) = sum_k coeffs[k] * skew(phi)^k.

    Uses d(skew(phi)^k a)/dphi = sum_m skew(phi)^m (-skew(skew(phi)^(k-1-m) a)).
    Truncated series; phi is one sample interval's rotation so |phi| is tiny.
    """
    K = skew(phi)
    Kpow = [np.eye(3)]
    for _ in range(len(coeffs)):
        Kpow.append(K @ Kpow[-1])
    out = np.zeros((3, 3))
    for k in range(1, len(coeffs) + 1):
        c = coeffs[k - 1]
        if c == 0.0:
            continue
        term = np.zeros((3, 3))
        for m in range(k):
            term += Kpow[m] @ (-skew(Kpow[k - 1 - m] @ a))
        out += c * term
    return out


# series coefficients for skew powers k = 1..4
_JL_COEFFS = [1.0 / 2.0, 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0]
_G2_COEFFS = [1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0, 1.0 / 720.0]


def preintegrate(samples, bias: ImuBias, noise: ImuNoise) -> Preintegrated:
    """Integrate consecutive IMU samples into relative motion deltas.

    Needs at least two samples (one interval). Per interval the averaged,
    bias-corrected rates are treated as constant and integrated exactly,
    alongside first-order bias Jacobians and the 9x9 noise covariance.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples to preintegrate")
    times = np.array([s.timestamp for s in samples])
    if np.any(np.diff(times) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")

    q = np.array([0.0, 0.0, 0.0, 1.0])
    dv = np.zeros(3)
    dp = np.zeros(3)
    P = np.zeros((9, 9))
    J = np.zeros((9, 6))
    sig_g2 = noise.gyro_noise_density**2
    sig_a2 = noise.accel_noise_density**2

    for k in range(len(samples) - 1):
        s0, s1 = samples[k], samples[k + 1]
        dt = s1.timestamp - s0.timestamp
        w = 0.5 * (s0.angular_velocity + s1.angular_velocity) - bias.gyro_bias
        a = 0.5 * (s0.linear_acceleration + s1.linear_acceleration) - bias.accel_bias

        phi = w * dt
        E = so3_exp(phi)
        Jl = so3_left_jacobian(phi)
        Jr = so3_right_jacobian(phi)
        G2 = _gamma2(phi)
        R = quat_to_matrix(q)

        JR = J[0:3, 0:3]
        Jv_g, Jv_a = J[3:6, 0:3], J[3:6, 3:6]
        Jp_g, Jp_a = J[6:9, 0:3], J[6:9, 3:6]

        dJl = _matrix_series_dir(phi, a, _JL_COEFFS)
        dG2 = _matrix_series_dir(phi, a, _G2_COEFFS)
        Jla = Jl @ a
        G2a = G2 @ a

        Jp_g_new = Jp_g + Jv_g * dt - R @ (skew(G2a) @ JR * dt**2 + dG2 * dt**3)
        Jp_a_new = Jp_a + Jv_a * dt - R @ G2 * dt**2
        Jv_g_new = Jv_g - R @ (skew(Jla) @ JR * dt + dJl * dt**2)
        Jv_a_new = Jv_a - R @ Jl * dt
        JR_new = E.T @ JR - Jr * dt
        J = np.block([[JR_new, np.zeros((3, 3))],
                      [Jv_g_new, Jv_a_new],
                      [Jp_g_new, Jp_a_new]])

        A = np.eye(9)
        A[0:3, 0:3] = E.T
        A[3:6, 0:3] = -R @ skew(a) * dt
        A[6:9, 0:3] = -0.5 * R @ skew(a) * dt**2
        A[6:9, 3:6] = np.eye(3) * dt
        B = np.zeros((9, 6))
        B[0:3, 0:3] = Jr * dt
        B[3:6, 3:6] = R * dt
        B[6:9, 3:6] = 0.5 * R * dt**2
        Q = np.diag([sig_g2] * 3 + [sig_a2] * 3) / dt
        P = A @ P @ A.T + B @ Q @ B.T

        dp = dp + dv * dt + R @ G2a * dt**2
        dv = dv + R @ Jla * dt
        q = canonical_quat(quat_mul(q, quat_from_rotvec(phi)))

    return Preintegrated(q, dv, dp, 0.5 * (P + P.T), J,
                         float(times[-1] - times[0]), bias)


# ---------------------------------------------------------------------------
# stationary detection


def detect_stationary_imu(samples, window: float = 1.0,
                          gyro_thresh: float = 0.02,
                          accel_dev_thresh: float = 0.05):
    """Find rest periods from raw IMU; returns [(start_time, end_time), ...].

    A sliding window of the given duration is stationary when the peak
    angular rate stays below gyro_thresh and the standard deviation of the
    acceleration magnitude stays below accel_dev_thresh. Overlapping
    stationary windows are merged. Map the time spans onto pose indices
    with intervals_to_pose_indices.
    """
    if len(samples) == 0:
        raise ValueError("no IMU samples")
    times = np.array([s.timestamp for s in samples])
    wmag = np.array([np.linalg.norm(s.angular_velocity) for s in samples])
    amag = np.array([np.linalg.norm(s.linear_acceleration) for s in samples])

    dt = np.median(np.diff(times)) if len(times) > 1 else window
    n = int(round(window / dt)) + 1
    n = max(2, min(n, len(times)))

    w_max = sliding_window_view(wmag, n).max(axis=1)
    a_std = sliding_window_view(amag, n).std(axis=1)
    ok = (w_max < gyro_thresh) & (a_std < accel_dev_thresh)

    covered = np.zeros(len(times) + 1, dtype=int)
    for k in np.flatnonzero(ok):
        covered[k] += 1
        covered[k + n] -= 1
    mask = np.cumsum(covered)[:-1] > 0

    intervals = []
    k = 0
    while k < len(mask):
        if mask[k]:
            start = k
            while k + 1 < len(mask) and mask[k + 1]:
                k += 1
            intervals.append((float(times[start]), float(times[k])))
        k += 1
    return intervals


def intervals_to_pose_indices(time_intervals, pose_timestamps):
    """Convert time spans to inclusive pose-index intervals."""
    stamps = np.asarray(pose_timestamps, dtype=float)
    flags = np.zeros(len(stamps), dtype=bool)
    for t0, t1 in time_intervals:
        flags |= (stamps >= t0) & (stamps <= t1)
    return _flags_to_intervals(flags)


def _flags_to_intervals(flags):
    out = []
    k = 0
    n = len(flags)
    while k < n:
        if flags[k]:
            start = k
            while k + 1 < n and flags[k + 1]:
                k += 1
            out.append(StationaryInterval(start, k))
        k += 1
    return out


def detect_stationary_icp(trajectory, motion_thresh_trans: float = 0.01,
                          motion_thresh_rot: float = 0.5):
    """Chain poses whose step-to-step motion is below both thresholds.

    motion_thresh_rot is in degrees. Returns inclusive pose-index intervals.
    """
    if len(trajectory) < 2:
        raise ValueError("need at least two poses")
    rot_rad = np.deg2rad(motion_thresh_rot)
    flags = np.zeros(len(trajectory), dtype=bool)
    for k in range(len(trajectory) - 1):
        rel = inverse(trajectory[k]) * trajectory[k + 1]
        if (np.linalg.norm(rel.trans) < motion_thresh_trans
                and rotation_angle(rel) < rot_rad):
            flags[k] = flags[k + 1] = True
    return _flags_to_intervals(flags)


def stationary_from_constraints(constraints, num_poses: int,
                                trans_thresh: float = 0.01,
                                rot_thresh: float = 0.5):
    """Rest intervals from near-identity pairwise constraints.

    Any constraint (i, j, relative) whose relative transform magnitude is
    below both thresholds (rot_thresh in degrees) marks poses i..j as
    stationary. Useful when raw odometry steps are too noisy for
    detect_stationary_icp but matched constraints are clean.
    """
    rot_rad = np.deg2rad(rot_thresh)
    flags = np.zeros(num_poses, dtype=bool)
    for c in constraints:
        rel = c.relative
        if (np.linalg.norm(rel.trans) < trans_thresh
                and rotation_angle(rel) < rot_rad):
            flags[c.i:c.j + 1] = True
    return _flags_to_intervals(flags)


def intersect_intervals(a, b, min_length: int = 0):
    """Pose-index intersection of two interval lists."""
    out = []
    for ia in a:
        for ib in b:
            lo = max(ia.start_index, ib.start_index)
            hi = min(ia.end_index, ib.end_index)
            if hi - lo >= min_length and lo <= hi:
                out.append(StationaryInterval(lo, hi))
    out.sort(key=lambda s: s.start_index)
    return out


def assign_bias_segments(intervals, num_poses: int) -> np.ndarray:
    """One bias-segment id per pose; a new segment opens at each rest start.

    Poses before the first rest share segment 0; an interval starting at
    pose 0 therefore opens no new segment. Ids are contiguous from 0.
    """
    ivs = sorted(intervals, key=lambda s: s.start_index)
    for prev, cur in zip(ivs, ivs[1:]):
        if cur.start_index <= prev.end_index:
            raise ValueError("stationary intervals overlap")
    for iv in ivs:
        if iv.start_index < 0 or iv.end_index >= num_poses:
            raise ValueError("interval out of bounds")
    boundaries = [iv.start_index for iv in ivs if iv.start_index > 0]
    ids = np.zeros(num_poses, dtype=int)
    for b in boundaries:
        ids[b:] += 1
    return ids
