"""Trajectory evaluation: ATE with rigid alignment, and per-delta RPE."""

from __future__ import annotations

import numpy as np

from .geometry import Pose3, compose, inverse, rotation_angle


def associate_timestamps(stamps_a, stamps_b, tol: float = 0.02):
    """Greedy one-to-one matching of two timestamp arrays within ``tol``.

    Candidate pairs are taken in order of time difference, each index used at
    most once; returns a list of (index_a, index_b).
    """
    a = np.asarray(stamps_a, dtype=float)
    b = np.asarray(stamps_b, dtype=float)
    cands = []
    for ia, t in enumerate(a):
        ib = int(np.argmin(np.abs(b - t))) if len(b) else -1
        if ib >= 0 and abs(b[ib] - t) <= tol:
            cands.append((abs(b[ib] - t), ia, ib))
    cands.sort()
    used_a, used_b, out = set(), set(), []
    for _, ia, ib in cands:
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        out.append((ia, ib))
    out.sort()
    return out


def rigid_alignment(source: np.ndarray, target: np.ndarray) -> Pose3:
    """Least-squares rotation + translation mapping source onto target."""
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (N, 3)")
    if len(src) < 3:
        raise ValueError("need at least 3 matched points for alignment")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cd - r @ cs
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    return Pose3.from_matrix(m)


def _positions(trajectory):
    return np.array([p.trans for p in trajectory])


def evaluate_ate(estimated, ground_truth, est_stamps=None, gt_stamps=None,
                 tol: float = 0.02) -> float:
    """Absolute trajectory error: RMSE of positions after rigid alignment.

    Without timestamps the trajectories must be index-aligned and equally
    long; with timestamps, poses are associated within ``tol`` seconds first.
    """
    if est_stamps is not None or gt_stamps is not None:
        if est_stamps is None or gt_stamps is None:
            raise ValueError("provide both timestamp arrays or neither")
        pairs = associate_timestamps(est_stamps, gt_stamps, tol)
        est = [estimated[ia] for ia, _ in pairs]
        gt = [ground_truth[ib] for _, ib in pairs]
    else:
        if len(estimated) != len(ground_truth):
            raise ValueError("index-aligned trajectories must match in length")
        est, gt = list(estimated), list(ground_truth)
    if len(est) < 3:
        raise ValueError("need at least 3 matched poses")
    p_est = _positions(est)
    p_gt = _positions(gt)
    align = rigid_alignment(p_est, p_gt)
    residual = align.apply(p_est) - p_gt
    return float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))


def evaluate_rpe(estimated, ground_truth, delta: int = 1):
    """Relative pose error at an index gap: (trans RMSE m, rot RMSE deg)."""
    if len(estimated) != len(ground_truth):
        raise ValueError("trajectories must match in length")
    n = len(estimated)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if delta >= n:
        raise ValueError(f"delta {delta} too large for {n} poses")
    terrs, rerrs = [], []
    for k in range(n - delta):
        rel_est = compose(inverse(estimated[k]), estimated[k + delta])
        rel_gt = compose(inverse(ground_truth[k]), ground_truth[k + delta])
        err = compose(inverse(rel_gt), rel_est)
        terrs.append(np.linalg.norm(err.trans))
        rerrs.append(np.degrees(rotation_angle(err)))
    trans = float(np.sqrt(np.mean(np.square(terrs))))
    rot = float(np.sqrt(np.mean(np.square(rerrs))))
    return trans, rot
