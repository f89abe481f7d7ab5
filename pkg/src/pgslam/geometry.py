"""SE(3)/SO(3) manifold arithmetic, point clouds and nearest-neighbor search.

Conventions used throughout the package:

- rotations are stored as unit quaternions in (x, y, z, w) order with w >= 0,
  so the log map always returns the principal branch (angle <= pi)
- tangent vectors (``Twist6``) are 6-vectors ordered rotation-first:
  ``[wx, wy, wz, vx, vy, vz]``
- poses map body-frame coordinates to world-frame coordinates,
  ``p_world = R p_body + t``
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

_QUAT_NORM_TOL = 1e-9
_SMALL_ANGLE = 1e-8


class BranchCutWarning(UserWarning):
    """Rotation angle within 1e-6 of pi: the log map branch is ambiguous."""


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# quaternions (x, y, z, w)

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(w))
    if angle < _SMALL_ANGLE:
        # sin(a/2)/a ~ 1/2 - a^2/48
        s = 0.5 - angle * angle / 48.0
        q = np.array([w[0] * s, w[1] * s, w[2] * s, np.cos(0.5 * angle)])
    else:
        s = np.sin(0.5 * angle) / angle
        q = np.array([w[0] * s, w[1] * s, w[2] * s, np.cos(0.5 * angle)])
    return q / np.linalg.norm(q)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Principal-branch rotation vector (angle <= pi) of a unit quaternion."""
    q = canonical_quat(q)
    vn = float(np.linalg.norm(q[:3]))
    angle = 2.0 * np.arctan2(vn, q[3])
    if np.pi - angle < 1e-6:
        warnings.warn(
            "rotation angle within 1e-6 of pi; log branch chosen by quaternion sign",
            BranchCutWarning,
            stacklevel=2,
        )
    if vn < _SMALL_ANGLE:
        # angle/sin(angle/2) ~ 2 + angle^2/12
        return q[:3] * (2.0 + angle * angle / 12.0)
    return q[:3] * (angle / vn)


def canonical_quat(q: np.ndarray) -> np.ndarray:
    """Fix the sign ambiguity: w > 0, ties broken by the first nonzero of xyz."""
    if q[3] < 0.0:
        return -q
    if q[3] == 0.0:
        for c in q[:3]:
            if c != 0.0:
                return q if c > 0.0 else -q
    return q


# ---------------------------------------------------------------------------
# SO(3) helpers on rotation vectors

def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation matrix of a rotation vector."""
    angle = float(np.linalg.norm(w))
    W = skew(w)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a2 = angle * angle
    return np.eye(3) + (np.sin(angle) / angle) * W + ((1.0 - np.cos(angle)) / a2) * (W @ W)


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(w))
    W = skew(w)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    a2 = angle * angle
    return (np.eye(3)
            + ((1.0 - np.cos(angle)) / a2) * W
            + ((angle - np.sin(angle)) / (a2 * angle)) * (W @ W))


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(w))
    W = skew(w)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    a2 = angle * angle
    coeff = (1.0 / a2) - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) - 0.5 * W + coeff * (W @ W)


def so3_right_jacobian(w: np.ndarray) -> np.ndarray:
    return so3_left_jacobian(-np.asarray(w, dtype=float))


# ---------------------------------------------------------------------------
# Pose3

@dataclass(frozen=True)
class Pose3:
    """Rigid transform in SE(3): unit quaternion (x, y, z, w) plus translation.

    Instances are immutable; every constructor normalizes the quaternion and
    fixes its sign so that equal rotations have equal representations.
    """

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float)
        n = float(np.linalg.norm(q))
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        # Skip the division when the norm is already 1 to machine precision;
        # renormalizing would perturb the last ulp and break exact text
        # round trips of serialized poses.
        if abs(n - 1.0) > 1e-12:
            q = q / n
        q = canonical_quat(q)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=float).reshape(3).copy())

    @staticmethod
    def identity() -> "Pose3":
        return Pose3()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose3":
        R = np.asarray(m)[:3, :3]
        w = so3_log_matrix(R)
        return Pose3(quat_from_rotvec(w), np.asarray(m)[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.trans
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (N, 3) into the parent frame."""
        R = self.rotation_matrix()
        return np.asarray(points) @ R.T + self.trans

    def __mul__(self, other: "Pose3") -> "Pose3":
        return compose(self, other)

    def __repr__(self):
        q = self.quat
        t = self.trans
        return (f"Pose3(q=[{q[0]:.6g}, {q[1]:.6g}, {q[2]:.6g}, {q[3]:.6g}], "
                f"t=[{t[0]:.6g}, {t[1]:.6g}, {t[2]:.6g}])")


def so3_log_matrix(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, principal branch."""
    # go through the quaternion for stability near pi
    t = np.trace(R)
    if t > 0.0:
        w = np.sqrt(1.0 + t) / 2.0
        q = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], 0.0]) / (4.0 * w)
        q[3] = w
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0))
        q = np.zeros(4)
        q[i] = 0.5 * s
        if s > 0.0:
            q[3] = (R[k, j] - R[j, k]) / (2.0 * s)
            q[j] = (R[j, i] + R[i, j]) / (2.0 * s)
            q[k] = (R[k, i] + R[i, k]) / (2.0 * s)
    q = q / np.linalg.norm(q)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BranchCutWarning)
        return quat_to_rotvec(q)


def compose(a: Pose3, b: Pose3) -> Pose3:
    return Pose3(quat_mul(a.quat, b.quat), a.rotation_matrix() @ b.trans + a.trans)


def inverse(a: Pose3) -> Pose3:
    qi = quat_conj(a.quat)
    return Pose3(qi, -(quat_to_matrix(qi) @ a.trans))


def se3_exp(xi: np.ndarray) -> Pose3:
    """Exponential map of a twist ``[w, v]`` (rotation part first)."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("twist must be finite")
    w, v = xi[:3], xi[3:]
    return Pose3(quat_from_rotvec(w), so3_left_jacobian(w) @ v)


def se3_log(p: Pose3) -> np.ndarray:
    """Principal-branch inverse of :func:`se3_exp`."""
    w = quat_to_rotvec(p.quat)
    v = so3_left_jacobian_inv(w) @ p.trans
    return np.concatenate([w, v])


def se3_adjoint(p: Pose3) -> np.ndarray:
    """Adjoint matrix: ``p * exp(xi) * p^-1 == exp(Ad(p) xi)``."""
    R = p.rotation_matrix()
    ad = np.zeros((6, 6))
    ad[:3, :3] = R
    ad[3:, :3] = skew(p.trans) @ R
    ad[3:, 3:] = R
    return ad


def _se3_ad_small(xi: np.ndarray) -> np.ndarray:
    ad = np.zeros((6, 6))
    W = skew(xi[:3])
    ad[:3, :3] = W
    ad[3:, :3] = skew(xi[3:])
    ad[3:, 3:] = W
    return ad


def se3_left_jacobian(xi: np.ndarray, terms: int = 30) -> np.ndarray:
    """Left Jacobian of SE(3) as a truncated series sum_k ad^k / (k+1)!."""
    ad = _se3_ad_small(np.asarray(xi, dtype=float))
    J = np.eye(6)
    term = np.eye(6)
    for k in range(1, terms):
        term = term @ ad / (k + 1.0)
        J = J + term
        if np.abs(term).max() < 1e-18:
            break
    return J


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return np.linalg.inv(se3_left_jacobian(-np.asarray(xi, dtype=float)))


def rotation_angle(p: Pose3) -> float:
    """Rotation angle of a pose in radians, in [0, pi]."""
    return float(2.0 * np.arctan2(np.linalg.norm(p.quat[:3]), abs(p.quat[3])))


# ---------------------------------------------------------------------------
# point clouds

@dataclass
class PointCloud:
    """Points (N, 3) in meters with optional unit normals (N, 3)."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals must match points in length")

    def __len__(self) -> int:
        return len(self.points)


def transform_cloud(p: Pose3, c: PointCloud) -> PointCloud:
    """Apply a pose to a cloud; normals rotate but do not translate."""
    R = p.rotation_matrix()
    pts = c.points @ R.T + p.trans
    nrm = c.normals @ R.T if c.normals is not None else None
    return PointCloud(pts, nrm)


class KdTree:
    """Static nearest-neighbor index over a point cloud."""

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise ValueError("cannot build a KdTree over an empty cloud")
        self._tree = cKDTree(cloud.points)
        self.size = len(cloud)

    def nearest(self, query: np.ndarray, max_dist: float = np.inf):
        """Index and distance of the nearest point within max_dist, else None."""
        dist, idx = self._tree.query(np.asarray(query, dtype=float), k=1,
                                     distance_upper_bound=max_dist)
        if idx == self.size:
            return None
        return int(idx), float(dist)

    def nearest_batch(self, queries: np.ndarray, max_dist: float = np.inf):
        """Vectorized nearest: (indices, distances); misses get index -1."""
        dist, idx = self._tree.query(np.asarray(queries, dtype=float), k=1,
                                     distance_upper_bound=max_dist)
        idx = np.where(idx == self.size, -1, idx)
        return idx, dist

    def query_knn(self, queries: np.ndarray, k: int):
        return self._tree.query(np.asarray(queries, dtype=float), k=k)


def build_kdtree(c: PointCloud) -> KdTree:
    return KdTree(c)


def estimate_normals(c: PointCloud, k: int = 12, origin: np.ndarray | None = None) -> PointCloud:
    """Per-point normals from the k-NN covariance, oriented toward the sensor.

    The normal is the eigenvector of the neighborhood covariance with the
    smallest eigenvalue, flipped so that it points from the surface toward
    ``origin`` (the sensor position, default the frame origin).
    """
    if k < 3:
        raise ValueError("normal estimation needs k >= 3")
    if len(c) < k:
        raise ValueError(f"cloud has {len(c)} points, need at least k={k}")
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    tree = cKDTree(c.points)
    _, idx = tree.query(c.points, k=k)
    neigh = c.points[idx]                      # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]                    # smallest eigenvalue first
    flip = np.einsum("ni,ni->n", normals, origin - c.points) < 0.0
    normals[flip] = -normals[flip]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(c.points.copy(), normals)
