"""Edge proposal, parallel pairwise registration, and constraint gating.

Candidates come from a KD-tree over odometry positions; each survivor is
registered with the SGLD sampler seeded deterministically from (global seed,
i, j), so results do not depend on worker count or scheduling.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose3, compose, inverse, rotation_angle
from .registration import RegistrationError, RegistrationParams, sgld_posterior

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EdgeCandidate:
    i: int
    j: int

    def __post_init__(self):
        if self.i >= self.j:
            raise ValueError("candidate indices must satisfy i < j")
        if self.i < 0:
            raise ValueError("candidate indices must be non-negative")


@dataclass(frozen=True)
class ConstraintFilterParams:
    translation_threshold: float = 0.04     # meters
    rotation_threshold: float = 5.0         # degrees

    def __post_init__(self):
        if self.translation_threshold <= 0 or self.rotation_threshold <= 0:
            raise ValueError("filter thresholds must be positive")


@dataclass(frozen=True)
class IcpConstraint:
    i: int
    j: int
    relative: Pose3         # pose of frame j expressed in frame i
    covariance: np.ndarray  # 6x6 in the tangent at `relative`
    rms_residual: float

    def __post_init__(self):
        if self.i >= self.j:
            raise ValueError("constraint indices must satisfy i < j")
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (6, 6) or not np.allclose(cov, cov.T, atol=1e-9):
            raise ValueError("covariance must be a symmetric 6x6 matrix")
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))


def propose_edges(trajectory, knn: int = 25, gap_min: int = 5,
                  gap_max: int = 25, loop_radius: float | None = 2.0):
    """Candidate pairs from k-nearest odometry positions.

    A neighbor pair (i, j) is kept when gap_min <= j - i <= gap_max, or, if
    ``loop_radius`` is set, when the gap exceeds gap_max but the positions lie
    within that radius (long-range loop closures).  Output is deduplicated,
    i < j, sorted lexicographically.
    """
    n = len(trajectory)
    if n < 2:
        raise ValueError("need at least two poses to propose edges")
    if not (0 < gap_min <= gap_max):
        raise ValueError("need 0 < gap_min <= gap_max")
    positions = np.array([p.trans for p in trajectory])
    tree = cKDTree(positions)
    k = min(knn + 1, n)
    dists, idx = tree.query(positions, k=k)
    pairs = set()
    for i in range(n):
        for d, j in zip(np.atleast_1d(dists[i]), np.atleast_1d(idx[i])):
            j = int(j)
            if j == i:
                continue
            gap = abs(j - i)
            keep = gap_min <= gap <= gap_max
            if not keep and loop_radius is not None:
                keep = gap > gap_max and d < loop_radius
            if keep:
                pairs.add((min(i, j), max(i, j)))
    return [EdgeCandidate(i, j) for i, j in sorted(pairs)]


def relative_from_odometry(trajectory, i: int, j: int) -> Pose3:
    """Relative transform inverse(T_i) * T_j from the odometry trajectory."""
    n = len(trajectory)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"pose index out of range: ({i}, {j}) with {n} poses")
    return compose(inverse(trajectory[i]), trajectory[j])


def discrepancy(constraint_relative: Pose3, odometry_relative: Pose3):
    """Translation (m) and rotation (deg) of the error transform."""
    delta = compose(inverse(odometry_relative), constraint_relative)
    trans = float(np.linalg.norm(delta.trans))
    rot = float(np.degrees(rotation_angle(delta)))
    return trans, rot


def filter_constraints(constraints, trajectory,
                       params: ConstraintFilterParams | None = None):
    """Gate constraints against the odometry relative transform.

    Returns (kept, rejected) where rejected entries are (constraint, reason)
    with reason one of "translation", "rotation", "both".  The two lists
    partition the input.
    """
    if params is None:
        params = ConstraintFilterParams()
    kept, rejected = [], []
    for c in constraints:
        odo = relative_from_odometry(trajectory, c.i, c.j)
        trans, rot = discrepancy(c.relative, odo)
        bad_t = trans > params.translation_threshold
        bad_r = rot > params.rotation_threshold
        if bad_t and bad_r:
            rejected.append((c, "both"))
        elif bad_t:
            rejected.append((c, "translation"))
        elif bad_r:
            rejected.append((c, "rotation"))
        else:
            kept.append(c)
    return kept, rejected


# ---------------------------------------------------------------------------
# Parallel registration
# ---------------------------------------------------------------------------

_WORKER_CTX = None


def _init_worker(scans, trajectory, params, seed):
    global _WORKER_CTX
    _WORKER_CTX = (scans, trajectory, params, seed)


def _register_pair(pair):
    i, j = pair
    scans, trajectory, params, seed = _WORKER_CTX
    return _register_one(i, j, scans, trajectory, params, seed)


def _register_one(i, j, scans, trajectory, params, seed):
    """Register one candidate; returns (i, j, constraint or None, message)."""
    try:
        target = scans[i]
        source = scans[j]
    except Exception as exc:
        return i, j, None, f"scan load failed: {exc}"
    init = relative_from_odometry(trajectory, i, j)
    rng = np.random.default_rng([seed, i, j])
    try:
        result = sgld_posterior(source, target, init, params, rng=rng)
    except RegistrationError as exc:
        return i, j, None, f"registration failed: {exc}"
    cov = result.covariance
    eigs = np.linalg.eigvalsh(cov)
    if eigs[0] <= 0.0 or not np.all(np.isfinite(cov)):
        return i, j, None, f"covariance not positive definite (min eig {eigs[0]:.3g})"
    constraint = IcpConstraint(i, j, result.mean_pose, cov, result.rms_residual)
    return i, j, constraint, ""


def register_edges(candidates, scans, trajectory,
                   params: RegistrationParams | None = None,
                   workers: int = 1, seed: int = 0):
    """Register all candidates; failures are logged and skipped.

    The per-edge RNG stream depends only on (seed, i, j), so the output is
    identical for any worker count.  Constraints come back sorted by (i, j).
    """
    if params is None:
        params = RegistrationParams()
    jobs = sorted({(c.i, c.j) for c in candidates})
    outcomes = []
    if workers <= 1:
        for i, j in jobs:
            outcomes.append(_register_one(i, j, scans, trajectory, params, seed))
    else:
        with ProcessPoolExecutor(
                max_workers=workers, initializer=_init_worker,
                initargs=(scans, trajectory, params, seed)) as pool:
            outcomes = list(pool.map(_register_pair, jobs, chunksize=4))
    constraints = []
    for i, j, constraint, message in outcomes:
        if constraint is None:
            log.warning("edge (%d, %d) skipped: %s", i, j, message)
        else:
            constraints.append(constraint)
    return constraints
