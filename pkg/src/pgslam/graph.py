"""Factor graph over poses, velocities and IMU biases, with LM optimization.

Variables live on a product manifold: poses retract on the right via se3_exp,
velocities and biases are plain vectors.  Stationary intervals are enforced as
hard equalities by aliasing pose variables through a union-find, so the poses
inside an interval share one column of the normal equations and come out of
the solver bit-identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .geometry import (
    Pose3,
    compose,
    inverse,
    se3_adjoint,
    se3_exp,
    se3_log,
    se3_right_jacobian_inv,
    skew,
    so3_exp,
    so3_left_jacobian_inv,
    so3_log_matrix,
    so3_right_jacobian,
)
from .imu import ImuBias, Preintegrated, StationaryInterval

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])

# Information used to pin velocities inside aliased stationary intervals.
ZERO_VELOCITY_SIGMA = 1e-4


class VariableId(NamedTuple):
    kind: str       # "pose" | "velocity" | "bias"
    index: int


def pose_id(i: int) -> VariableId:
    return VariableId("pose", int(i))


def velocity_id(i: int) -> VariableId:
    return VariableId("velocity", int(i))


def bias_id(k: int) -> VariableId:
    return VariableId("bias", int(k))


VARIABLE_DIMS = {"pose": 6, "velocity": 3, "bias": 6}


class GaugeError(ValueError):
    """The graph has a connected component with no anchoring prior."""


def _check_information(info, dim, name):
    info = np.asarray(info, dtype=float)
    if info.shape != (dim, dim):
        raise ValueError(f"{name} information must be {dim}x{dim}")
    if not np.allclose(info, info.T, atol=1e-9):
        raise ValueError(f"{name} information must be symmetric")
    info = 0.5 * (info + info.T)
    eigs = np.linalg.eigvalsh(info)
    if eigs[0] < -1e-12 * max(1.0, abs(eigs[-1])):
        raise ValueError(f"{name} information must be positive semidefinite")
    return info


def so3_right_jacobian_inv(w: np.ndarray) -> np.ndarray:
    return so3_left_jacobian_inv(-np.asarray(w, dtype=float))


# ---------------------------------------------------------------------------
# Residual functions (shared by the factors and by the gradient-check tests)
# ---------------------------------------------------------------------------

def between_residual(t_i: Pose3, t_j: Pose3, measured: Pose3) -> np.ndarray:
    """Tangent-space mismatch log(Z^-1 T_i^-1 T_j) of a relative-pose edge."""
    return se3_log(compose(inverse(measured), compose(inverse(t_i), t_j)))


def between_jacobians(t_i: Pose3, t_j: Pose3, measured: Pose3):
    """Analytic Jacobians of between_residual wrt right perturbations of i, j."""
    r = between_residual(t_i, t_j, measured)
    jr_inv = se3_right_jacobian_inv(r)
    j_j = jr_inv
    j_i = -jr_inv @ se3_adjoint(compose(inverse(t_j), t_i))
    return r, j_i, j_j


def imu_residual(state_i, state_j, bias: ImuBias, pre: Preintegrated,
                 gravity: np.ndarray = GRAVITY) -> np.ndarray:
    """Preintegrated IMU residual (r_R, r_v, r_p) between two nav states.

    Each state is a (Pose3, velocity) pair in the world frame.  The stored
    deltas are corrected to first order for the difference between ``bias``
    and the preintegration linearization point.
    """
    if pre.duration <= 0.0:
        raise ValueError("preintegrated interval must have positive duration")
    pose_i, v_i = state_i
    pose_j, v_j = state_j
    g = np.asarray(gravity, dtype=float)
    r_i = pose_i.rotation_matrix()
    dt = pre.duration
    d_rot, d_vel, d_pos = pre.corrected_deltas(bias)
    r_rot = so3_log_matrix(d_rot.T @ r_i.T @ pose_j.rotation_matrix())
    r_vel = r_i.T @ (np.asarray(v_j, float) - v_i - g * dt) - d_vel
    r_pos = r_i.T @ (pose_j.trans - pose_i.trans - np.asarray(v_i, float) * dt
                     - 0.5 * g * dt * dt) - d_pos
    return np.concatenate([r_rot, r_vel, r_pos])


def imu_jacobians(state_i, state_j, bias: ImuBias, pre: Preintegrated,
                  gravity: np.ndarray = GRAVITY):
    """Residual and Jacobians wrt (pose_i, vel_i, pose_j, vel_j, bias).

    Pose blocks are 9x6 in (rotation, translation) tangent order with
    right-perturbation convention; the bias block is 9x6 over (gyro, accel).
    """
    pose_i, v_i = state_i
    pose_j, v_j = state_j
    g = np.asarray(gravity, dtype=float)
    r_i = pose_i.rotation_matrix()
    r_j = pose_j.rotation_matrix()
    dt = pre.duration
    res = imu_residual(state_i, state_j, bias, pre, gravity)
    r_rot = res[0:3]
    jr_inv = so3_right_jacobian_inv(r_rot)

    u_vel = r_i.T @ (np.asarray(v_j, float) - v_i - g * dt)
    u_pos = r_i.T @ (pose_j.trans - pose_i.trans - np.asarray(v_i, float) * dt
                     - 0.5 * g * dt * dt)

    j_pose_i = np.zeros((9, 6))
    j_pose_i[0:3, 0:3] = -jr_inv @ r_j.T @ r_i
    j_pose_i[3:6, 0:3] = skew(u_vel)
    j_pose_i[6:9, 0:3] = skew(u_pos)
    j_pose_i[6:9, 3:6] = -np.eye(3)

    j_pose_j = np.zeros((9, 6))
    j_pose_j[0:3, 0:3] = jr_inv
    j_pose_j[6:9, 3:6] = r_i.T @ r_j

    j_vel_i = np.zeros((9, 3))
    j_vel_i[3:6, :] = -r_i.T
    j_vel_i[6:9, :] = -r_i.T * dt

    j_vel_j = np.zeros((9, 3))
    j_vel_j[3:6, :] = r_i.T

    db = bias.as_vector() - pre.linearization_bias.as_vector()
    phi = pre.bias_jacobians[0:3] @ db
    j_bias = np.zeros((9, 6))
    j_bias[0:3, :] = (-jr_inv @ so3_exp(r_rot).T @ so3_right_jacobian(phi)
                      @ pre.bias_jacobians[0:3])
    j_bias[3:9, :] = -pre.bias_jacobians[3:9]
    return res, (j_pose_i, j_vel_i, j_pose_j, j_vel_j, j_bias)


# ---------------------------------------------------------------------------
# Factors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorPose:
    var: VariableId
    prior: Pose3
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 6, "PriorPose"))

    def variables(self):
        return (self.var,)

    def evaluate(self, values, with_jacobians=False):
        r = se3_log(compose(inverse(self.prior), values[self.var]))
        if not with_jacobians:
            return r, None
        return r, [se3_right_jacobian_inv(r)]


@dataclass(frozen=True)
class BetweenPose:
    var_i: VariableId
    var_j: VariableId
    measured: Pose3
    information: np.ndarray
    huber_delta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 6, "BetweenPose"))
        if self.huber_delta is not None and self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")

    def variables(self):
        return (self.var_i, self.var_j)

    def evaluate(self, values, with_jacobians=False):
        t_i, t_j = values[self.var_i], values[self.var_j]
        if not with_jacobians:
            return between_residual(t_i, t_j, self.measured), None
        r, j_i, j_j = between_jacobians(t_i, t_j, self.measured)
        return r, [j_i, j_j]


@dataclass(frozen=True)
class PriorVelocity:
    var: VariableId
    prior: np.ndarray
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "prior", np.asarray(self.prior, dtype=float))
        object.__setattr__(self, "information",
                           _check_information(self.information, 3, "PriorVelocity"))

    def variables(self):
        return (self.var,)

    def evaluate(self, values, with_jacobians=False):
        r = values[self.var] - self.prior
        if not with_jacobians:
            return r, None
        return r, [np.eye(3)]


@dataclass(frozen=True)
class BiasPrior:
    var: VariableId
    prior: ImuBias
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 6, "BiasPrior"))

    def variables(self):
        return (self.var,)

    def evaluate(self, values, with_jacobians=False):
        r = values[self.var].as_vector() - self.prior.as_vector()
        if not with_jacobians:
            return r, None
        return r, [np.eye(6)]


@dataclass(frozen=True)
class BetweenBias:
    """Random-walk link between consecutive bias segments (zero mean change)."""

    var_i: VariableId
    var_j: VariableId
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 6, "BetweenBias"))

    def variables(self):
        return (self.var_i, self.var_j)

    def evaluate(self, values, with_jacobians=False):
        r = values[self.var_j].as_vector() - values[self.var_i].as_vector()
        if not with_jacobians:
            return r, None
        return r, [-np.eye(6), np.eye(6)]


@dataclass(frozen=True)
class ImuFactor:
    pose_i: VariableId
    vel_i: VariableId
    pose_j: VariableId
    vel_j: VariableId
    bias: VariableId
    pre: Preintegrated
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    information: np.ndarray | None = None

    def __post_init__(self):
        if self.pre.duration <= 0.0:
            raise ValueError("ImuFactor needs a positive-duration preintegration")
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))
        if self.information is None:
            info = np.linalg.inv(self.pre.covariance)
            object.__setattr__(self, "information", 0.5 * (info + info.T))
        else:
            object.__setattr__(self, "information",
                               _check_information(self.information, 9, "ImuFactor"))

    def variables(self):
        return (self.pose_i, self.vel_i, self.pose_j, self.vel_j, self.bias)

    def evaluate(self, values, with_jacobians=False):
        state_i = (values[self.pose_i], values[self.vel_i])
        state_j = (values[self.pose_j], values[self.vel_j])
        b = values[self.bias]
        if not with_jacobians:
            return imu_residual(state_i, state_j, b, self.pre, self.gravity), None
        r, jacs = imu_jacobians(state_i, state_j, b, self.pre, self.gravity)
        return r, list(jacs)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------

class FactorGraph:
    """Container of variables (with initial values) and factors.

    Pose variables can be aliased; ``canonical`` resolves any pose id to its
    union-find representative and value lookups go through it, so aliased
    poses are one variable by construction.
    """

    def __init__(self):
        self._initial: dict[VariableId, object] = {}
        self._factors: list = []
        self._parent: dict[VariableId, VariableId] = {}

    # -- variables ---------------------------------------------------------

    def add_pose(self, index: int, value: Pose3) -> VariableId:
        vid = pose_id(index)
        self._initial[vid] = value
        return vid

    def add_velocity(self, index: int, value) -> VariableId:
        vid = velocity_id(index)
        self._initial[vid] = np.asarray(value, dtype=float)
        return vid

    def add_bias(self, index: int, value: ImuBias) -> VariableId:
        vid = bias_id(index)
        self._initial[vid] = value
        return vid

    def canonical(self, var: VariableId) -> VariableId:
        root = var
        while root in self._parent:
            root = self._parent[root]
        while var in self._parent:        # path compression
            nxt = self._parent[var]
            self._parent[var] = root
            var = nxt
        return root

    def alias(self, a: VariableId, b: VariableId) -> None:
        """Merge two pose variables; the lower index becomes canonical."""
        if a.kind != "pose" or b.kind != "pose":
            raise ValueError("only pose variables can be aliased")
        ra, rb = self.canonical(a), self.canonical(b)
        if ra == rb:
            return
        keep, drop = (ra, rb) if ra.index < rb.index else (rb, ra)
        self._parent[drop] = keep
        self._initial.pop(drop, None)

    def has_variable(self, var: VariableId) -> bool:
        return self.canonical(var) in self._initial

    # -- factors -----------------------------------------------------------

    def add_factor(self, factor) -> None:
        for var in factor.variables():
            if not self.has_variable(var):
                raise KeyError(f"factor references unknown variable {var}")
        self._factors.append(factor)

    @property
    def factors(self):
        return list(self._factors)

    def variables(self):
        """Canonical variable ids in deterministic (kind, index) order."""
        order = {"pose": 0, "velocity": 1, "bias": 2}
        return sorted(self._initial, key=lambda v: (order[v.kind], v.index))

    def initial_values(self) -> dict:
        return dict(self._initial)

    def value(self, values: dict, var: VariableId):
        return values[self.canonical(var)]

    def copy(self) -> "FactorGraph":
        g = FactorGraph()
        g._initial = dict(self._initial)
        g._factors = list(self._factors)
        g._parent = dict(self._parent)
        return g

    def trajectory(self, values: dict, count: int | None = None):
        """Pose list for indices 0..count-1, resolving aliases."""
        if count is None:
            known = [v.index for v in self._initial if v.kind == "pose"]
            known += [v.index for v in self._parent if v.kind == "pose"]
            count = 1 + max(known, default=-1)
        return [self.value(values, pose_id(i)) for i in range(count)]

    # -- evaluation --------------------------------------------------------

    def _resolved(self, factor):
        return [self.canonical(v) for v in factor.variables()]

    def _factor_chi2(self, factor, values) -> float:
        vals = {v: values[self.canonical(v)] for v in factor.variables()}
        r, _ = factor.evaluate(vals, with_jacobians=False)
        s = float(r @ factor.information @ r)
        delta = getattr(factor, "huber_delta", None)
        if delta is not None and s > delta * delta:
            s = 2.0 * delta * np.sqrt(s) - delta * delta
        return s

    def chi2(self, values: dict) -> float:
        return sum(self._factor_chi2(f, values) for f in self._factors)


# ---------------------------------------------------------------------------
# Stationary aliasing
# ---------------------------------------------------------------------------

def alias_stationary(graph: FactorGraph,
                     intervals: list[StationaryInterval]) -> FactorGraph:
    """Collapse each stationary interval onto a single pose variable.

    Between-pose factors whose endpoints merge become self-loops and are
    dropped (their information is redundant with the hard equality), and any
    velocity variables inside an interval get a strong zero prior.
    """
    out = graph.copy()
    if not intervals:
        return out
    for interval in intervals:
        anchor = pose_id(interval.start_index)
        if not out.has_variable(anchor):
            raise KeyError(f"interval references unknown pose {anchor.index}")
        for k in range(interval.start_index + 1, interval.end_index + 1):
            nxt = pose_id(k)
            if not out.has_variable(nxt):
                raise KeyError(f"interval references unknown pose {k}")
            out.alias(anchor, nxt)

    kept = []
    dropped = 0
    for f in out._factors:
        if isinstance(f, BetweenPose) and \
                out.canonical(f.var_i) == out.canonical(f.var_j):
            dropped += 1
            continue
        kept.append(f)
    out._factors = kept
    if dropped:
        log.info("alias_stationary removed %d intra-interval between factors",
                 dropped)

    info = np.eye(3) / ZERO_VELOCITY_SIGMA ** 2
    for interval in intervals:
        for k in range(interval.start_index, interval.end_index + 1):
            vid = velocity_id(k)
            if out.has_variable(vid):
                out.add_factor(PriorVelocity(vid, np.zeros(3), info))
    return out


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass
class OptimizeParams:
    max_iterations: int = 50
    tolerance: float = 1e-9
    lambda_init: float = 1e-6
    lambda_factor: float = 10.0
    lambda_max: float = 1e10


@dataclass
class OptimizeStats:
    iterations: int
    initial_chi2: float
    final_chi2: float
    lambda_trace: list
    converged: bool
    chi2_trace: list = field(default_factory=list)


def _check_gauge(graph: FactorGraph) -> None:
    """Every connected component must be anchored by a prior factor."""
    variables = graph.variables()
    if not variables:
        return
    comp = {v: v for v in variables}

    def find(v):
        while comp[v] != v:
            comp[v] = comp[comp[v]]
            v = comp[v]
        return v

    for f in graph.factors:
        ids = [graph.canonical(v) for v in f.variables()]
        for other in ids[1:]:
            ra, rb = find(ids[0]), find(other)
            if ra != rb:
                comp[rb] = ra

    anchored = set()
    pose_anchored = set()
    for f in graph.factors:
        ids = [graph.canonical(v) for v in f.variables()]
        if len(set(ids)) == 1:
            root = find(ids[0])
            anchored.add(root)
            if isinstance(f, PriorPose):
                pose_anchored.add(root)

    by_root: dict[VariableId, list[VariableId]] = {}
    unreferenced = set(variables)
    for f in graph.factors:
        for v in f.variables():
            unreferenced.discard(graph.canonical(v))
    if unreferenced:
        raise GaugeError(f"variables with no factors: {sorted(unreferenced)}")

    for v in variables:
        by_root.setdefault(find(v), []).append(v)
    for root, members in by_root.items():
        has_pose = any(v.kind == "pose" for v in members)
        if has_pose and root not in pose_anchored:
            raise GaugeError(
                "connected component containing "
                f"{sorted(members)[:4]}... has no pose prior (gauge free)")
        if not has_pose and root not in anchored:
            raise GaugeError(
                f"connected component {sorted(members)[:4]}... has no prior")


def _retract(graph: FactorGraph, values: dict, delta: np.ndarray,
             offsets: dict) -> dict:
    out = {}
    for var, off in offsets.items():
        d = delta[off:off + VARIABLE_DIMS[var.kind]]
        cur = values[var]
        if var.kind == "pose":
            out[var] = compose(cur, se3_exp(d))
        elif var.kind == "velocity":
            out[var] = cur + d
        else:
            out[var] = ImuBias.from_vector(cur.as_vector() + d)
    return out


def _linearize(graph: FactorGraph, values: dict, offsets: dict, dim: int):
    h = np.zeros((dim, dim))
    g = np.zeros(dim)
    for f in graph.factors:
        vals = {v: values[graph.canonical(v)] for v in f.variables()}
        r, jacs = f.evaluate(vals, with_jacobians=True)
        info = f.information
        delta = getattr(f, "huber_delta", None)
        if delta is not None:
            s = float(r @ info @ r)
            if s > delta * delta:
                info = info * (delta / np.sqrt(s))
        resolved = [graph.canonical(v) for v in f.variables()]
        wj = [info @ j for j in jacs]
        wr = info @ r
        for a, va in enumerate(resolved):
            oa, da = offsets[va], VARIABLE_DIMS[va.kind]
            g[oa:oa + da] += jacs[a].T @ wr
            for b, vb in enumerate(resolved):
                ob, db = offsets[vb], VARIABLE_DIMS[vb.kind]
                h[oa:oa + da, ob:ob + db] += jacs[a].T @ wj[b]
    return h, g


def _solve_damped(h: np.ndarray, g: np.ndarray, lam: float) -> np.ndarray:
    d = np.diag(h).copy()
    d[d < 1e-12] = 1e-12
    hd = h + np.diag(lam * d)
    n = h.shape[0]
    if n > 600:
        sp = scipy.sparse.csc_matrix(hd)
        return scipy.sparse.linalg.spsolve(sp, -g)
    c, low = scipy.linalg.cho_factor(hd)
    return scipy.linalg.cho_solve((c, low), -g)


def optimize(graph: FactorGraph, params: OptimizeParams | None = None,
             values: dict | None = None):
    """Levenberg-Marquardt on the graph; returns (solution, OptimizeStats).

    Steps are accepted only when chi2 strictly decreases, so the chi2 trace
    is non-increasing.  Damping is multiplicative on the Hessian diagonal.
    """
    if params is None:
        params = OptimizeParams()
    _check_gauge(graph)
    values = dict(graph.initial_values() if values is None else values)

    variables = graph.variables()
    offsets, dim = {}, 0
    for v in variables:
        offsets[v] = dim
        dim += VARIABLE_DIMS[v.kind]

    chi2_cur = graph.chi2(values)
    if not np.isfinite(chi2_cur):
        raise ValueError("non-finite chi2 at the initial values")
    stats = OptimizeStats(iterations=0, initial_chi2=chi2_cur,
                          final_chi2=chi2_cur, lambda_trace=[],
                          converged=False, chi2_trace=[chi2_cur])

    lam = params.lambda_init
    for _ in range(params.max_iterations):
        h, g = _linearize(graph, values, offsets, dim)
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite residual during optimization")
        if np.max(np.abs(g)) < 1e-13:
            stats.converged = True
            break
        accepted = False
        while lam <= params.lambda_max:
            try:
                delta = _solve_damped(h, g, lam)
            except (scipy.linalg.LinAlgError, RuntimeError):
                stats.lambda_trace.append(lam)
                lam *= params.lambda_factor
                continue
            if not np.all(np.isfinite(delta)):
                stats.lambda_trace.append(lam)
                lam *= params.lambda_factor
                continue
            stats.lambda_trace.append(lam)
            trial = _retract(graph, values, delta, offsets)
            chi2_new = graph.chi2(trial)
            if np.isfinite(chi2_new) and chi2_new < chi2_cur:
                rel = (chi2_cur - chi2_new) / max(chi2_cur, 1e-300)
                values, chi2_cur = trial, chi2_new
                stats.iterations += 1
                stats.chi2_trace.append(chi2_cur)
                lam = max(lam / params.lambda_factor, 1e-12)
                accepted = True
                if rel < params.tolerance or np.linalg.norm(delta) < 1e-12:
                    stats.converged = True
                break
            lam *= params.lambda_factor
        if not accepted:
            # No damping level produced a decrease: at a local optimum.
            stats.converged = True
            break
        if stats.converged:
            break
    stats.final_chi2 = chi2_cur
    return values, stats


# ---------------------------------------------------------------------------
# g2o export / import of the pose portion
# ---------------------------------------------------------------------------

def export_g2o(graph: FactorGraph, values: dict | None = None) -> str:
    """Serialize canonical pose variables and between factors as g2o text."""
    from .io import format_edge_line, format_vertex_line

    if values is None:
        values = graph.initial_values()
    lines = []
    for var in graph.variables():
        if var.kind == "pose":
            lines.append(format_vertex_line(var.index, graph.value(values, var)))
    for f in graph.factors:
        if isinstance(f, BetweenPose):
            ci, cj = graph.canonical(f.var_i), graph.canonical(f.var_j)
            lines.append(format_edge_line(ci.index, cj.index, f.measured,
                                          f.information))
    return "\n".join(lines) + ("\n" if lines else "")


def import_g2o(text: str) -> FactorGraph:
    """Rebuild the pose portion of a graph from g2o text (no priors added)."""
    from .io import parse_g2o

    vertices, edges = parse_g2o(text)
    graph = FactorGraph()
    for vid in sorted(vertices):
        graph.add_pose(vid, vertices[vid])
    for e in edges:
        graph.add_factor(BetweenPose(pose_id(e["i"]), pose_id(e["j"]),
                                     e["pose"], e["information"]))
    return graph
