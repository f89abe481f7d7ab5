"""Synthetic world: planar environments, ray-cast LiDAR, analytic IMU.

Worlds are collections of finite rectangles (point, unit normal, two
half-extents), so scan points lie exactly on analytic surfaces and normals
have an exact reference. Trajectories interpolate waypoints with a quintic
ease curve per segment, which makes velocity and acceleration vanish at
every waypoint; the trajectory is C^2, rests are exactly constant, and the
reported derivatives are analytic. Everything is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    PointCloud,
    Pose3,
    canonical_quat,
    inverse,
    quat_conj,
    quat_from_rotvec,
    quat_mul,
    quat_to_rotvec,
    se3_exp,
)
from .imu import ImuBias, ImuNoise, ImuSample

GRAVITY = np.array([0.0, 0.0, -9.81])


class Plane:
    """Finite rectangle: anchor point, unit normal, half-extents along u, v.

    The in-plane frame is derived from the normal: u = normalize(n x e) with
    e the world z axis (or x when the normal is near-vertical), v = n x u.
    """

    def __init__(self, point, normal, half_extents):
        self.point = np.asarray(point, dtype=float)
        n = np.asarray(normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ValueError("plane normal must be nonzero")
        self.normal = n / norm
        self.half_extents = np.asarray(half_extents, dtype=float)
        if np.any(self.half_extents <= 0):
            raise ValueError("half extents must be positive")
        e = np.array([0.0, 0.0, 1.0])
        if abs(self.normal @ e) > 0.9:
            e = np.array([1.0, 0.0, 0.0])
        u = np.cross(self.normal, e)
        self.u = u / np.linalg.norm(u)
        self.v = np.cross(self.normal, self.u)


@dataclass
class WorldModel:
    planes: list = field(default_factory=list)

    def add_plane(self, point, normal, half_extents):
        self.planes.append(Plane(point, normal, half_extents))

    def add_box(self, center, size, inward=False):
        """Six rectangular faces; inward=True flips normals into the box."""
        c = np.asarray(center, dtype=float)
        half = np.asarray(size, dtype=float) / 2.0
        for axis in range(3):
            for sgn in (-1.0, 1.0):
                n = np.zeros(3)
                n[axis] = sgn * (-1.0 if inward else 1.0)
                point = c.copy()
                point[axis] += sgn * half[axis]
                plane = Plane(point, n, (1.0, 1.0))
                ext = np.array([abs(plane.u) @ half, abs(plane.v) @ half])
                plane.half_extents = ext
                self.planes.append(plane)


@dataclass
class LidarModel:
    azimuth_count: int = 90
    elevation_count: int = 7
    elevation_range: tuple = (-30.0, 30.0)      # degrees
    max_range: float = 30.0
    range_noise_sigma: float = 0.0

    def __post_init__(self):
        if self.azimuth_count <= 0 or self.elevation_count <= 0:
            raise ValueError("ray counts must be positive")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if np.isscalar(self.elevation_range):
            h = float(self.elevation_range) / 2.0
            self.elevation_range = (-h, h)

    def ray_directions(self) -> np.ndarray:
        az = 2.0 * np.pi * np.arange(self.azimuth_count) / self.azimuth_count
        lo, hi = np.deg2rad(self.elevation_range)
        if self.elevation_count == 1:
            el = np.array([(lo + hi) / 2.0])
        else:
            el = np.linspace(lo, hi, self.elevation_count)
        azg, elg = np.meshgrid(az, el)
        azg, elg = azg.ravel(), elg.ravel()
        return np.column_stack([np.cos(elg) * np.cos(azg),
                                np.cos(elg) * np.sin(azg),
                                np.sin(elg)])


@dataclass
class TrajectorySpec:
    waypoints: list                      # (time, Pose3) pairs
    rest_intervals: list = field(default_factory=list)   # (start, end) seconds
    imu_rate: float = 200.0
    scan_rate: float = 2.0

    def duration(self) -> float:
        return self.waypoints[-1][0] - self.waypoints[0][0]

    def scan_times(self) -> np.ndarray:
        t0 = self.waypoints[0][0]
        n = int(np.floor(self.duration() * self.scan_rate + 1e-9)) + 1
        return t0 + np.arange(n) / self.scan_rate


def _ease(tau):
    """Quintic ease curve and its first two derivatives w.r.t. tau."""
    s = tau**3 * (10.0 - 15.0 * tau + 6.0 * tau**2)
    ds = 30.0 * tau**2 * (1.0 - tau) ** 2
    dds = 60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau)
    return s, ds, dds


def _vec_quat_mul(a, b):
    ax, ay, az, aw = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bx, by, bz, bw = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.column_stack([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def _vec_quat_from_rotvec(w):
    angle = np.linalg.norm(w, axis=1)
    half = 0.5 * angle
    small = angle < 1e-12
    k = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    return np.column_stack([w * k[:, None], np.cos(half)])


def _vec_quat_to_matrix(q):
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((len(q), 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - z * w)
    m[:, 0, 2] = 2 * (x * z + y * w)
    m[:, 1, 0] = 2 * (x * y + z * w)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - x * w)
    m[:, 2, 0] = 2 * (x * z - y * w)
    m[:, 2, 1] = 2 * (y * z + x * w)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


class ContinuousTrajectory:
    """Piecewise eased interpolation of timed waypoints.

    Positions follow the segment chord with a quintic ease; rotations follow
    the geodesic with the same eased rate, so the body angular velocity is
    the segment rotation vector times the rate. Velocity and acceleration
    are exactly zero at every waypoint, which keeps derivatives continuous
    across segments. Queries outside the time span clamp to the endpoints.
    """

    def __init__(self, waypoints):
        self.times = np.array([t for t, _ in waypoints])
        self.quats = np.array([p.quat for _, p in waypoints])
        self.trans = np.array([p.trans for _, p in waypoints])
        self.seg_dt = np.diff(self.times)
        self.seg_d = np.diff(self.trans, axis=0)
        rel = _vec_quat_mul(
            np.column_stack([-self.quats[:-1, :3], self.quats[:-1, 3]]),
            self.quats[1:])
        self.seg_theta = np.array([quat_to_rotvec(q) for q in rel])

    def _locate(self, t):
        t = np.clip(np.atleast_1d(np.asarray(t, dtype=float)),
                    self.times[0], self.times[-1])
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1,
                    0, len(self.times) - 2)
        tau = (t - self.times[k]) / self.seg_dt[k]
        return k, np.clip(tau, 0.0, 1.0)

    def positions(self, t):
        k, tau = self._locate(t)
        s, _, _ = _ease(tau)
        return self.trans[k] + s[:, None] * self.seg_d[k]

    def quaternions(self, t):
        k, tau = self._locate(t)
        s, _, _ = _ease(tau)
        step = _vec_quat_from_rotvec(s[:, None] * self.seg_theta[k])
        return _vec_quat_mul(self.quats[k], step)

    def velocities(self, t):
        k, tau = self._locate(t)
        _, ds, _ = _ease(tau)
        return (ds / self.seg_dt[k])[:, None] * self.seg_d[k]

    def accelerations(self, t):
        k, tau = self._locate(t)
        _, _, dds = _ease(tau)
        return (dds / self.seg_dt[k] ** 2)[:, None] * self.seg_d[k]

    def angular_velocities(self, t):
        """Body-frame angular rates."""
        k, tau = self._locate(t)
        _, ds, _ = _ease(tau)
        return (ds / self.seg_dt[k])[:, None] * self.seg_theta[k]

    def pose(self, t) -> Pose3:
        return Pose3(canonical_quat(self.quaternions(t)[0]), self.positions(t)[0])

    def velocity(self, t):
        return self.velocities(t)[0]

    def acceleration(self, t):
        return self.accelerations(t)[0]

    def angular_velocity(self, t):
        return self.angular_velocities(t)[0]


def generate_trajectory(spec: TrajectorySpec) -> ContinuousTrajectory:
    """Build the continuous trajectory, holding declared rest intervals.

    Rests are realized by pinning the interpolated pose at the rest start
    over the whole interval; waypoints falling inside a rest are dropped.
    """
    if len(spec.waypoints) < 2:
        raise ValueError("need at least two waypoints")
    times = [t for t, _ in spec.waypoints]
    if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
        raise ValueError("waypoint times must be strictly increasing")
    wps = list(spec.waypoints)
    for start, end in spec.rest_intervals:
        if not (times[0] <= start < end <= times[-1]):
            raise ValueError("rest interval outside trajectory span")
        held = ContinuousTrajectory(wps).pose(start)
        wps = [(t, p) for t, p in wps if not (start <= t <= end)]
        wps += [(start, held), (end, held)]
        wps.sort(key=lambda w: w[0])
    return ContinuousTrajectory(wps)


# ---------------------------------------------------------------------------
# sensors


def simulate_scan(world: WorldModel, pose: Pose3, lidar: LidarModel,
                  seed=0) -> PointCloud:
    """Ray-cast one scan; returns hit points in the sensor frame."""
    dirs_body = lidar.ray_directions()
    R = pose.rotation_matrix()
    origin = pose.trans
    dirs = dirs_body @ R.T
    best = np.full(len(dirs), np.inf)
    hit_normal = np.zeros((len(dirs), 3))
    for plane in world.planes:
        denom = dirs @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((plane.point - origin) @ plane.normal) / denom
        t = np.where(np.abs(denom) > 1e-12, t, -1.0)
        hit = origin[None, :] + t[:, None] * dirs - plane.point
        ok = ((t > 1e-9) & (t <= lidar.max_range)
              & (np.abs(hit @ plane.u) <= plane.half_extents[0] + 1e-12)
              & (np.abs(hit @ plane.v) <= plane.half_extents[1] + 1e-12))
        closer = ok & (t < best)
        best = np.where(closer, t, best)
        hit_normal[closer] = plane.normal
    mask = np.isfinite(best)
    ranges = best[mask]
    if lidar.range_noise_sigma > 0:
        rng = np.random.default_rng(seed)
        ranges = ranges + rng.normal(0.0, lidar.range_noise_sigma, len(ranges))
    # exact surface normals in the sensor frame, oriented back at the sensor
    normals = hit_normal[mask] @ R
    flip = np.einsum("ij,ij->i", normals, dirs_body[mask]) > 0
    normals[flip] *= -1.0
    return PointCloud(dirs_body[mask] * ranges[:, None], normals)


def _bias_at(bias_schedule, t: float) -> ImuBias:
    if bias_schedule is None:
        return ImuBias()
    if isinstance(bias_schedule, ImuBias):
        return bias_schedule
    current = bias_schedule[0][1]
    for start, b in bias_schedule:
        if start <= t:
            current = b
        else:
            break
    return current


def simulate_imu(traj: ContinuousTrajectory, bias_schedule=None,
                 noise: ImuNoise | None = None, rate: float = 200.0,
                 seed=0, gravity=GRAVITY) -> list:
    """Sample ideal IMU readings along the trajectory, plus bias and noise.

    Gyro: body angular velocity. Accel: specific force R^T (a - g), so a
    resting sensor reads +9.81 on its up axis. White noise uses the
    continuous densities scaled by sqrt(rate).
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    t0, t1 = traj.times[0], traj.times[-1]
    n = int(np.floor((t1 - t0) * rate + 1e-9)) + 1
    times = t0 + np.arange(n) / rate

    w = traj.angular_velocities(times)
    Rmats = _vec_quat_to_matrix(traj.quaternions(times))
    lin = traj.accelerations(times) - gravity[None, :]
    a = np.einsum("nji,nj->ni", Rmats, lin)

    if noise is not None:
        rng = np.random.default_rng(seed)
        w = w + noise.gyro_noise_density * np.sqrt(rate) * rng.standard_normal(w.shape)
        a = a + noise.accel_noise_density * np.sqrt(rate) * rng.standard_normal(a.shape)

    samples = []
    for k, t in enumerate(times):
        b = _bias_at(bias_schedule, t)
        samples.append(ImuSample(float(t), w[k] + b.gyro_bias,
                                 a[k] + b.accel_bias))
    return samples


def perturb_odometry(gt, drift_sigma, seed=0):
    """Inject cumulative drift: each step's relative pose gets tangent noise.

    drift_sigma is a 6-vector of per-axis standard deviations in the
    (rotation, translation) tangent ordering. The first pose is returned
    unchanged.
    """
    if len(gt) == 0:
        raise ValueError("empty trajectory")
    sigma = np.asarray(drift_sigma, dtype=float)
    rng = np.random.default_rng(seed)
    out = [gt[0]]
    for k in range(1, len(gt)):
        rel = inverse(gt[k - 1]) * gt[k]
        xi = sigma * rng.standard_normal(6)
        out.append(out[-1] * rel * se3_exp(xi))
    return out


def drift_sigma(trans_m: float, rot_deg: float) -> np.ndarray:
    """Per-step drift vector from a translation and rotation magnitude."""
    r = np.deg2rad(rot_deg)
    return np.array([r, r, r, trans_m, trans_m, trans_m])


# ---------------------------------------------------------------------------
# stock scenes


def _pose_xyzyaw(x, y, z, yaw_deg) -> Pose3:
    q = quat_from_rotvec(np.array([0.0, 0.0, np.deg2rad(yaw_deg)]))
    return Pose3(q, np.array([x, y, z], dtype=float))


class TrajectoryBuilder:
    """Waypoint script: straight moves, turns in place, and rests."""

    def __init__(self, x, y, z, yaw_deg, t0=0.0):
        self._wps = [(float(t0), _pose_xyzyaw(x, y, z, yaw_deg))]
        self._rests = []

    @property
    def _last(self):
        return self._wps[-1]

    def move_to(self, x, y, z=None, speed=0.85):
        t, p = self._last
        z = p.trans[2] if z is None else z
        target = np.array([x, y, z], dtype=float)
        dist = np.linalg.norm(target - p.trans)
        self._wps.append((t + dist / speed, Pose3(p.quat, target)))
        return self

    def turn_to(self, yaw_deg, duration=2.4):
        t, p = self._last
        new = _pose_xyzyaw(p.trans[0], p.trans[1], p.trans[2], yaw_deg)
        self._wps.append((t + duration, new))
        return self

    def rest(self, duration=4.0):
        t, p = self._last
        self._wps.append((t + duration, p))
        self._rests.append((t, t + duration))
        return self

    def build(self, imu_rate=200.0, scan_rate=2.0, target_end=None):
        wps, rests = self._wps, self._rests
        if target_end is not None:
            t0 = wps[0][0]
            scale = (target_end - t0) / (wps[-1][0] - t0)
            wps = [(t0 + (t - t0) * scale, p) for t, p in wps]
            rests = [(t0 + (a - t0) * scale, t0 + (b - t0) * scale)
                     for a, b in rests]
        return TrajectorySpec(wps, rests, imu_rate, scan_rate)


@dataclass
class Scene:
    name: str
    world: WorldModel
    spec: TrajectorySpec


def box_room_world() -> WorldModel:
    """Closed 8 x 6 x 3 room; six mutually constraining planes."""
    world = WorldModel()
    world.add_box((0.0, 0.0, 1.5), (8.0, 6.0, 3.0), inward=True)
    return world


def box_room_scene() -> Scene:
    traj = (TrajectoryBuilder(-2.0, -1.5, 1.5, 0.0)
            .move_to(2.0, -1.5).turn_to(90.0)
            .move_to(2.0, 1.5).turn_to(180.0)
            .move_to(-2.0, 1.5).turn_to(270.0)
            .move_to(-2.0, -1.5).turn_to(360.0))
    return Scene("box_room", box_room_world(),
                 traj.build(imu_rate=200.0, scan_rate=2.0))


def corridor_world() -> WorldModel:
    """L-shaped corridor, 2 m wide and 3 m tall, turning left at x = 10."""
    w = WorldModel()
    up, down = (0, 0, 1.0), (0, 0, -1.0)
    w.add_plane((6.0, 0.0, 0.0), up, (1.0, 6.0))
    w.add_plane((6.0, 0.0, 3.0), down, (1.0, 6.0))
    w.add_plane((11.0, 4.5, 0.0), up, (5.5, 1.0))
    w.add_plane((11.0, 4.5, 3.0), down, (5.5, 1.0))
    w.add_plane((6.0, -1.0, 1.5), (0, 1.0, 0), (6.0, 1.5))
    w.add_plane((5.0, 1.0, 1.5), (0, -1.0, 0), (5.0, 1.5))
    w.add_plane((0.0, 0.0, 1.5), (1.0, 0, 0), (1.0, 1.5))
    w.add_plane((12.0, 4.5, 1.5), (-1.0, 0, 0), (5.5, 1.5))
    w.add_plane((10.0, 5.5, 1.5), (1.0, 0, 0), (4.5, 1.5))
    w.add_plane((11.0, 10.0, 1.5), (0, -1.0, 0), (1.0, 1.5))
    return w


def corridor_scene() -> Scene:
    traj = (TrajectoryBuilder(1.0, 0.0, 1.5, 0.0, t0=0.0)
            .move_to(11.0, 0.0, speed=1.0).turn_to(90.0, duration=2.0)
            .move_to(11.0, 9.0, speed=1.0))
    return Scene("corridor_with_corner", corridor_world(),
                 traj.build(imu_rate=200.0, scan_rate=2.0))


def two_loop_world() -> WorldModel:
    """Large hall with a central pillar and two crates."""
    world = WorldModel()
    world.add_box((0.0, 0.0, 1.75), (16.0, 12.0, 3.5), inward=True)
    world.add_box((0.0, 0.0, 1.75), (2.0, 1.6, 3.5))
    world.add_box((5.5, 4.0, 0.5), (1.0, 1.0, 1.0))
    world.add_box((-5.0, -4.5, 0.6), (1.2, 0.9, 1.2))
    return world


def two_loop_scene(n_scans: int = 200, scan_rate: float = 2.0,
                   imu_rate: float = 200.0) -> Scene:
    """Two laps around the hall with three scripted rests mid-run."""
    b = TrajectoryBuilder(5.0, -3.0, 1.5, 90.0)
    b.move_to(5.0, 3.0).turn_to(180.0)
    b.move_to(-5.0, 3.0).rest().turn_to(270.0)
    b.move_to(-5.0, -3.0).turn_to(360.0)
    b.move_to(5.0, -3.0).rest().turn_to(450.0)
    b.move_to(5.0, 3.0).turn_to(540.0)
    b.move_to(0.0, 3.0).rest()
    b.move_to(-5.0, 3.0).turn_to(630.0)
    b.move_to(-5.0, -3.0).turn_to(720.0)
    b.move_to(5.0, -3.0)
    target_end = (n_scans - 0.5) / scan_rate
    return Scene("two_loop_circuit", two_loop_world(),
                 b.build(imu_rate=imu_rate, scan_rate=scan_rate,
                         target_end=target_end))


SCENES = {
    "box_room": box_room_scene,
    "corridor_with_corner": corridor_scene,
    "two_loop_circuit": two_loop_scene,
}


def make_scene(name: str, **kwargs) -> Scene:
    if name not in SCENES:
        raise ValueError(f"unknown scene {name!r}; have {sorted(SCENES)}")
    return SCENES[name](**kwargs)
