"""Point-to-plane registration: deterministic ICP and SGLD posterior sampling.

The deterministic path iterates nearest-neighbor correspondences and
Gauss-Newton on the stacked point-to-plane residuals. The sampling path runs
stochastic gradient Langevin dynamics in the 6-dof tangent space around a
moving anchor pose, treating the same residuals as a Gaussian likelihood
with a weak Gaussian prior on the offset from the initial guess; the
post-burn-in chain gives both the relative pose (tangent mean) and its 6x6
covariance (sample scatter).

Tangent vectors order rotation before translation throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import KdTree, PointCloud, Pose3, inverse, se3_exp, se3_log


class RegistrationError(RuntimeError):
    """Registration could not produce a usable estimate."""


@dataclass
class RegistrationParams:
    max_iterations: int = 30
    correspondence_max_dist: float = 1.0
    convergence_tol: float = 1e-8
    sgld_steps: int = 600
    sgld_burn_in: int = 200
    sgld_step_size: float = 3e-7        # initial step size epsilon_0
    sgld_step_decay: float = 0.55       # polynomial decay exponent
    minibatch_size: int = 256
    noise_sigma: float = 0.02           # per-residual measurement sigma, m
    prior_sigma_rot: float = 0.5        # rad, prior on offset from init
    prior_sigma_trans: float = 0.5      # m
    refresh_every: int = 50             # steps between correspondence updates
    normal_agreement_deg: float = 60.0  # max source/target normal mismatch

    def __post_init__(self):
        if self.sgld_burn_in >= self.sgld_steps:
            raise ValueError("burn-in must be smaller than sgld_steps")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be at least 1")
        for name in ("max_iterations", "correspondence_max_dist",
                     "convergence_tol", "sgld_step_size", "sgld_step_decay",
                     "noise_sigma", "prior_sigma_rot", "prior_sigma_trans",
                     "refresh_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class RegistrationResult:
    mean_pose: Pose3
    covariance: np.ndarray | None
    samples: np.ndarray | None          # (n, 6) tangent offsets from mean
    converged: bool
    rms_residual: float
    num_correspondences: int


def point_to_plane_residual(source_point, target_point, target_normal,
                            t: Pose3) -> float:
    """Signed distance of the transformed source point to the target plane."""
    moved = t.rotation_matrix() @ np.asarray(source_point) + t.trans
    return float(np.asarray(target_normal) @ (moved - np.asarray(target_point)))


def _check_clouds(source: PointCloud, target: PointCloud):
    if len(source) == 0 or len(target) == 0:
        raise RegistrationError("empty point cloud")
    if target.normals is None:
        raise ValueError("target cloud must carry normals")


def _correspondences(source, tree, target, pose: Pose3, max_dist,
                     min_normal_dot=None):
    """Match transformed source points to nearest target points.

    When the source also carries normals, pairs whose rotated source normal
    disagrees with the target normal beyond the configured angle are
    dropped; this prunes wrong-surface matches near edges. Returns (matched
    source points, target points, target normals).
    """
    moved = pose.apply(source.points)
    idx, _ = tree.nearest_batch(moved, max_dist=max_dist)
    hit = idx >= 0
    if source.normals is not None and min_normal_dot is not None:
        rotated = source.normals @ pose.rotation_matrix().T
        agree = np.abs(np.einsum(
            "ij,ij->i", rotated, target.normals[np.clip(idx, 0, None)])
        ) >= min_normal_dot
        hit = hit & agree
    if not np.any(hit):
        raise RegistrationError(
            f"no correspondences within {max_dist} m")
    sel = idx[hit]
    return source.points[hit], target.points[sel], target.normals[sel]


def _residuals_jacobian(P, Q, Nrm, pose: Pose3):
    """Stacked residuals and their tangent-space Jacobian rows.

    Row k is [ (p_k x a_k)^T  a_k^T ] with a_k = R^T n_k, the derivative of
    n . (T exp(xi) p - q) at xi = 0.
    """
    R = pose.rotation_matrix()
    r = np.einsum("ij,ij->i", Nrm, P @ R.T + pose.trans - Q)
    a = Nrm @ R
    J = np.concatenate([np.cross(P, a), a], axis=1)
    return r, J


def icp_point_to_plane(source: PointCloud, target: PointCloud,
                       t_init: Pose3, params: RegistrationParams
                       ) -> RegistrationResult:
    """Deterministic point-to-plane ICP via Gauss-Newton.

    Stops when the step norm drops below convergence_tol. A singular normal
    matrix marks the result non-converged and leaves the covariance out;
    otherwise covariance = noise_sigma^2 (J^T J)^-1 at the final estimate.
    """
    _check_clouds(source, target)
    tree = KdTree(target)
    gate = np.cos(np.deg2rad(params.normal_agreement_deg))
    pose = t_init
    converged = False
    for _ in range(params.max_iterations):
        P, Q, Nrm = _correspondences(source, tree, target, pose,
                                     params.correspondence_max_dist, gate)
        r, J = _residuals_jacobian(P, Q, Nrm, pose)
        H = J.T @ J
        eigs = np.linalg.eigvalsh(H)
        if eigs[0] <= 1e-10 * max(1.0, eigs[-1]):
            rms = float(np.sqrt(np.mean(r**2)))
            return RegistrationResult(pose, None, None, False, rms, len(r))
        delta = np.linalg.solve(H, -J.T @ r)
        pose = pose * se3_exp(delta)
        if np.linalg.norm(delta) < params.convergence_tol:
            converged = True
            break

    P, Q, Nrm = _correspondences(source, tree, target, pose,
                                 params.correspondence_max_dist, gate)
    r, J = _residuals_jacobian(P, Q, Nrm, pose)
    H = J.T @ J
    eigs = np.linalg.eigvalsh(H)
    rms = float(np.sqrt(np.mean(r**2)))
    if eigs[0] <= 1e-10 * max(1.0, eigs[-1]):
        return RegistrationResult(pose, None, None, False, rms, len(r))
    cov = params.noise_sigma**2 * np.linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    return RegistrationResult(pose, cov, None, converged, rms, len(r))


def _step_schedule(params: RegistrationParams):
    """Polynomial decay a (b + t)^-gamma tuned to fall ~10x over the run."""
    gamma = params.sgld_step_decay
    b = params.sgld_steps / (10.0 ** (1.0 / gamma) - 1.0)
    a = params.sgld_step_size * b**gamma
    return a, b, gamma


# Lean matrix-level SO(3)/SE(3) helpers for the sampling hot loop. These
# avoid Pose3 construction costs per step; chain offsets stay well inside
# the stable region (re-anchoring bounds them), so the simple closed forms
# are safe here.

def _rot_exp(w):
    angle2 = w @ w
    W = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if angle2 < 1e-16:
        return np.eye(3) + W + 0.5 * (W @ W), \
            np.eye(3) + 0.5 * W + (W @ W) / 6.0
    angle = np.sqrt(angle2)
    W2 = W @ W
    E = np.eye(3) + (np.sin(angle) / angle) * W \
        + ((1.0 - np.cos(angle)) / angle2) * W2
    Jl = np.eye(3) + ((1.0 - np.cos(angle)) / angle2) * W \
        + ((angle - np.sin(angle)) / (angle2 * angle)) * W2
    return E, Jl


def _rot_log(R):
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0],
                        R[1, 0] - R[0, 1]])
    s = np.linalg.norm(v)
    c = 0.5 * (np.trace(R) - 1.0)
    angle = np.arctan2(s, c)
    if s < 1e-12:
        return v
    return v * (angle / s)


def _se3_log_mat(R, t):
    w = _rot_log(R)
    angle2 = w @ w
    W = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if angle2 < 1e-16:
        Jinv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
    else:
        angle = np.sqrt(angle2)
        coef = 1.0 / angle2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
        Jinv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return np.concatenate([w, Jinv @ t])


def sgld_posterior(source: PointCloud, target: PointCloud, t_init: Pose3,
                   params: RegistrationParams, rng=None) -> RegistrationResult:
    """Sample the registration posterior with Langevin dynamics.

    Each step takes half a preconditioner-free gradient step on the log
    posterior, estimated from a random correspondence minibatch scaled up by
    N/n, plus Gaussian noise of variance epsilon_t per coordinate. The chain
    state is a tangent offset from an anchor pose and is re-anchored when
    its norm exceeds 0.5. Deterministic for a fixed rng seed.
    """
    _check_clouds(source, target)
    rng = np.random.default_rng(rng)
    tree = KdTree(target)
    gate = np.cos(np.deg2rad(params.normal_agreement_deg))
    a_sched, b_sched, gamma = _step_schedule(params)
    sig2 = params.noise_sigma**2
    prior_inv_var = 1.0 / np.array([params.prior_sigma_rot**2] * 3
                                   + [params.prior_sigma_trans**2] * 3)
    eps_all = a_sched * (b_sched + np.arange(params.sgld_steps)) ** (-gamma)
    noise_all = rng.standard_normal((params.sgld_steps, 6)) \
        * np.sqrt(eps_all)[:, None]

    R_init = t_init.rotation_matrix()
    p_init = t_init.trans
    R_anc, p_anc = R_init, p_init
    R_cur, p_cur = R_init.copy(), p_init.copy()
    at_init_anchor = True
    xi = np.zeros(6)
    samples = []
    P = Q = Nrm = None
    batch_idx = None
    for t in range(params.sgld_steps):
        if t % params.refresh_every == 0:
            pose = Pose3.from_matrix(np.vstack([
                np.column_stack([R_cur, p_cur]), [0.0, 0.0, 0.0, 1.0]]))
            P, Q, Nrm = _correspondences(source, tree, target, pose,
                                         params.correspondence_max_dist,
                                         gate)
            n_total = len(P)
            n_batch = min(params.minibatch_size, n_total)
            batch_idx = rng.integers(0, n_total,
                                     size=(params.refresh_every, n_batch))
            scale = n_total / n_batch

        idx = batch_idx[t % params.refresh_every]
        p = P[idx]
        r = np.einsum("ij,ij->i", Nrm[idx], p @ R_cur.T + p_cur - Q[idx])
        a = Nrm[idx] @ R_cur
        w = (scale / sig2) * r
        g_lik = -np.array([
            (p[:, 1] * a[:, 2] - p[:, 2] * a[:, 1]) @ w,
            (p[:, 2] * a[:, 0] - p[:, 0] * a[:, 2]) @ w,
            (p[:, 0] * a[:, 1] - p[:, 1] * a[:, 0]) @ w,
            a[:, 0] @ w, a[:, 1] @ w, a[:, 2] @ w])

        if at_init_anchor:
            offset = xi
        else:
            offset = _se3_log_mat(R_init.T @ R_cur,
                                  R_init.T @ (p_cur - p_init))
        g_prior = -prior_inv_var * offset
        delta = 0.5 * eps_all[t] * (g_prior + g_lik) + noise_all[t]
        if not np.all(np.isfinite(delta)):
            raise RegistrationError("non-finite SGLD update; check inputs")

        E, Jl = _rot_exp(delta[:3])
        p_cur = p_cur + R_cur @ (Jl @ delta[3:])
        R_cur = R_cur @ E

        xi = _se3_log_mat(R_anc.T @ R_cur, R_anc.T @ (p_cur - p_anc))
        if xi @ xi > 0.25:
            shift_R, shift_p = R_cur.T @ R_anc, R_cur.T @ (p_anc - p_cur)
            moved = []
            for s in samples:
                Es, Jls = _rot_exp(s[:3])
                moved.append(_se3_log_mat(
                    shift_R @ Es, shift_R @ (Jls @ s[3:]) + shift_p))
            samples = moved
            R_anc, p_anc = R_cur.copy(), p_cur.copy()
            at_init_anchor = False
            xi = np.zeros(6)
        if t >= params.sgld_burn_in:
            samples.append(xi)

    samples = np.asarray(samples)
    xi_mean = samples.mean(axis=0)
    E, Jl = _rot_exp(xi_mean[:3])
    mean_pose = Pose3.from_matrix(np.vstack([
        np.column_stack([R_anc @ E, p_anc + R_anc @ (Jl @ xi_mean[3:])]),
        [0.0, 0.0, 0.0, 1.0]]))
    offsets = samples - xi_mean
    cov = covariance_from_samples(offsets)

    P, Q, Nrm = _correspondences(source, tree, target, mean_pose,
                                 params.correspondence_max_dist, gate)
    r, _ = _residuals_jacobian(P, Q, Nrm, mean_pose)
    rms = float(np.sqrt(np.mean(r**2)))
    return RegistrationResult(mean_pose, cov, offsets, True, rms, len(P))


def covariance_from_samples(samples) -> np.ndarray:
    """Unbiased scatter of tangent samples about their mean."""
    s = np.asarray(samples, dtype=float)
    if s.ndim != 2 or s.shape[1] != 6:
        raise ValueError("samples must be an (n, 6) array")
    if len(s) < 7:
        raise ValueError("need at least 7 samples for a rank-6 covariance")
    centered = s - s.mean(axis=0)
    cov = centered.T @ centered / (len(s) - 1)
    return 0.5 * (cov + cov.T)
