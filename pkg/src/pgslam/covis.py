"""Proxy co-visibility: project ICP-paired points into rig cameras and count.

Point pairs come from nearest neighbors between two scans expressed in one
frame; each pair member is projected into every camera of the rig at its own
pose, and a 2D histogram over (camera at pose i, camera at pose j) records
how many pairs both cameras see.  High cells predict image pairs that share
enough overlap to be worth matching visually.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose3, PointCloud, compose, inverse, transform_cloud

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


@dataclass(frozen=True)
class RigCalibration:
    """Cameras with their base-frame extrinsics T_base_cam."""

    cameras: tuple

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise ValueError("rig needs at least one camera")
        for cam, pose in cams:
            if not isinstance(cam, PinholeCamera) or not isinstance(pose, Pose3):
                raise TypeError("rig entries must be (PinholeCamera, Pose3)")
        object.__setattr__(self, "cameras", cams)

    def __len__(self):
        return len(self.cameras)


@dataclass(frozen=True)
class CovisMatrix:
    pose_i: int
    pose_j: int
    counts: np.ndarray      # (n_cam, n_cam), rows = cameras at pose i

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=int)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("counts must be a square matrix")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", counts)


def _axes_pose(x_axis, y_axis, z_axis, offset) -> Pose3:
    m = np.eye(4)
    m[:3, 0] = x_axis
    m[:3, 1] = y_axis
    m[:3, 2] = z_axis
    m[:3, 3] = offset
    return Pose3.from_matrix(m)


def default_rig(fx: float = 400.0, fy: float = 400.0, cx: float = 320.0,
                cy: float = 240.0, width: int = 640, height: int = 480) -> RigCalibration:
    """Five-camera fixture rig: four lateral views plus one facing up.

    Camera frames use the usual convention (z optical axis, x right, y down).
    """
    cam = PinholeCamera(fx, fy, cx, cy, width, height)
    poses = [
        # forward (+x), left (+y), backward (-x), right (-y)
        _axes_pose([0, -1, 0], [0, 0, -1], [1, 0, 0], [0.1, 0.0, 0.0]),
        _axes_pose([1, 0, 0], [0, 0, -1], [0, 1, 0], [0.0, 0.1, 0.0]),
        _axes_pose([0, 1, 0], [0, 0, -1], [-1, 0, 0], [-0.1, 0.0, 0.0]),
        _axes_pose([-1, 0, 0], [0, 0, -1], [0, -1, 0], [0.0, -0.1, 0.0]),
        # up (+z)
        _axes_pose([0, -1, 0], [-1, 0, 0], [0, 0, 1], [0.0, 0.0, 0.1]),
    ]
    return RigCalibration(tuple((cam, p) for p in poses))


def project(camera: PinholeCamera, t_world_cam: Pose3, point):
    """Pixel (u, v) of a world point, or None when outside the frustum."""
    p = inverse(t_world_cam).apply(np.asarray(point, dtype=float))
    if p[2] <= 0.0:
        return None
    u = camera.fx * p[0] / p[2] + camera.cx
    v = camera.fy * p[1] / p[2] + camera.cy
    if 0.0 <= u < camera.width and 0.0 <= v < camera.height:
        return (float(u), float(v))
    return None


def _visible_mask(camera: PinholeCamera, t_world_cam: Pose3,
                  points: np.ndarray) -> np.ndarray:
    """Vectorized frustum test for (N, 3) world points."""
    p = inverse(t_world_cam).apply(points)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * p[:, 0] / z + camera.cx
        v = camera.fy * p[:, 1] / z + camera.cy
    return (z > 0.0) & (u >= 0.0) & (u < camera.width) \
        & (v >= 0.0) & (v < camera.height)


def proxy_correspondences(cloud_i: PointCloud, cloud_j: PointCloud,
                          t_ij: Pose3, pose_i_world: Pose3,
                          rig: RigCalibration, pair_max_dist: float = 0.05,
                          indices: tuple = (0, 1)) -> CovisMatrix:
    """Count nearest-neighbor point pairs seen by each cross-pose camera pair.

    cloud_j is mapped into frame i via t_ij; every cloud_i point within
    pair_max_dist of its nearest mapped neighbor forms a pair.  counts[a][b]
    is the number of pairs whose frame-i member is inside camera a's frustum
    at pose i and whose frame-j member is inside camera b's at pose j.
    """
    n_cam = len(rig)
    counts = np.zeros((n_cam, n_cam), dtype=int)
    if len(cloud_i.points) == 0 or len(cloud_j.points) == 0:
        warnings.warn("empty cloud in proxy_correspondences; counts all zero")
        return CovisMatrix(indices[0], indices[1], counts)

    mapped_j = transform_cloud(t_ij, cloud_j)
    tree = cKDTree(mapped_j.points)
    dist, nn = tree.query(cloud_i.points, k=1,
                          distance_upper_bound=pair_max_dist)
    paired = np.isfinite(dist) & (dist <= pair_max_dist)
    if not np.any(paired):
        return CovisMatrix(indices[0], indices[1], counts)

    pts_i = cloud_i.points[paired]
    pts_j = cloud_j.points[nn[paired]]
    pose_j_world = compose(pose_i_world, t_ij)
    world_i = pose_i_world.apply(pts_i)
    world_j = pose_j_world.apply(pts_j)

    vis_i = [_visible_mask(cam, compose(pose_i_world, t_base_cam), world_i)
             for cam, t_base_cam in rig.cameras]
    vis_j = [_visible_mask(cam, compose(pose_j_world, t_base_cam), world_j)
             for cam, t_base_cam in rig.cameras]
    for a in range(n_cam):
        if not vis_i[a].any():
            continue
        for b in range(n_cam):
            counts[a, b] = int(np.count_nonzero(vis_i[a] & vis_j[b]))
    return CovisMatrix(indices[0], indices[1], counts)


def select_image_pairs(matrices, min_count: int):
    """Cells with count >= min_count as (pose_i, cam_a, pose_j, cam_b, count).

    Sorted by count descending, ties broken lexicographically.
    """
    rows = []
    for m in matrices:
        n_cam = m.counts.shape[0]
        for a in range(n_cam):
            for b in range(n_cam):
                c = int(m.counts[a, b])
                if c >= min_count:
                    rows.append((m.pose_i, a, m.pose_j, b, c))
    rows.sort(key=lambda r: (-r[4], r[0], r[1], r[2], r[3]))
    return rows
