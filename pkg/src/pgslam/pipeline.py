"""Pipeline stages with durable on-disk artifacts between them.

Each stage is a pure function of files written by earlier stages, so a run
can resume from whatever already exists and a rerun with the same config and
seed reproduces every artifact byte for byte (timings excepted, which is why
they live in their own file).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as pio
from .config import RunConfig
from .covis import default_rig, proxy_correspondences, select_image_pairs
from .edges import filter_constraints, propose_edges, register_edges
from .evaluation import evaluate_ate, evaluate_rpe
from .geometry import Pose3
from .graph import (BetweenBias, BetweenPose, BiasPrior, FactorGraph,
                    ImuFactor, OptimizeParams, PriorPose, alias_stationary,
                    bias_id, optimize, pose_id, velocity_id)
from .imu import (ImuBias, ImuNoise, StationaryInterval, assign_bias_segments,
                  detect_stationary_icp, detect_stationary_imu,
                  intersect_intervals, intervals_to_pose_indices, preintegrate)
from .sim import (LidarModel, drift_sigma, generate_trajectory, make_scene,
                  perturb_odometry, simulate_imu, simulate_scan)

log = logging.getLogger(__name__)

RUN_STAGES = ["simulate", "propose", "register", "filter", "build",
              "optimize", "evaluate"]


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(message)


@dataclass
class EvalReport:
    ate_rmse: float
    odometry_ate_rmse: float
    rpe_trans: dict
    rpe_rot: dict
    kept_edges: int
    rejected_edges: int
    reject_reasons: dict
    timings: dict = field(default_factory=dict)


class RunPaths:
    """File layout inside the output directory."""

    def __init__(self, cfg: RunConfig):
        out = Path(cfg.output_dir)
        self.out = out
        self.gt = out / "gt_trajectory.txt"
        self.odometry = cfg.resolved_path("trajectory")
        self.scans = cfg.resolved_path("scans_dir")
        self.imu = cfg.resolved_path("imu_csv")
        self.rig = cfg.resolved_path("rig")
        self.candidates = out / "candidates.csv"
        self.constraints_raw = out / "constraints_raw.g2o"
        self.register_meta = out / "register_meta.csv"
        self.constraints = out / "constraints.g2o"
        self.filter_report = out / "filter_report.csv"
        self.stationary = out / "stationary.csv"
        self.bias_segments = out / "bias_segments.csv"
        self.graph = out / "graph.g2o"
        self.graph_summary = out / "graph_summary.json"
        self.optimized = out / "optimized.txt"
        self.optimized_g2o = out / "optimized.g2o"
        self.optimize_stats = out / "optimize_stats.json"
        self.report = out / "report.json"
        self.metrics = out / "metrics.csv"
        self.covis = out / "covis.csv"
        self.timings = out / "timings.json"


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_simulate(cfg: RunConfig, paths: RunPaths) -> None:
    scene = make_scene(cfg.simulate.scene)
    cont = generate_trajectory(scene.spec)
    times = scene.spec.scan_times()
    gt = [cont.pose(t) for t in times]
    paths.out.mkdir(parents=True, exist_ok=True)
    pio.write_tum(paths.gt, times, gt)

    sigma = drift_sigma(cfg.simulate.drift_trans, cfg.simulate.drift_rot)
    odometry = perturb_odometry(gt, sigma, seed=cfg.seed)
    pio.write_tum(paths.odometry, times, odometry)

    paths.scans.mkdir(parents=True, exist_ok=True)
    lidar = LidarModel(range_noise_sigma=cfg.simulate.lidar_noise)
    for k, pose in enumerate(gt):
        target = paths.scans / f"scan_{k:05d}.ply"
        if target.exists():
            continue
        cloud = simulate_scan(scene.world, pose, lidar, seed=(cfg.seed, k))
        pio.write_ply(target, cloud)

    samples = simulate_imu(cont, rate=scene.spec.imu_rate)
    pio.write_imu_csv(paths.imu, samples)
    pio.write_rig(paths.rig, default_rig())


def stage_propose(cfg: RunConfig, paths: RunPaths) -> None:
    _, odometry = pio.read_tum(paths.odometry)
    candidates = propose_edges(odometry, knn=cfg.propose.knn,
                               gap_min=cfg.propose.gap_min,
                               gap_max=cfg.propose.gap_max,
                               loop_radius=cfg.propose.loop_radius)
    pio.write_candidates_csv(paths.candidates, candidates)


def stage_register(cfg: RunConfig, paths: RunPaths) -> None:
    _, odometry = pio.read_tum(paths.odometry)
    candidates = pio.read_candidates_csv(paths.candidates)
    scans = pio.ScanDirectory(paths.scans)
    for c in candidates:
        for k in (c.i, c.j):
            if not scans.exists(k):
                raise StageError(
                    "register",
                    f"edge ({c.i}, {c.j}): missing scan file {scans.path_for(k)}")
    constraints = register_edges(candidates, scans, odometry,
                                 params=cfg.registration,
                                 workers=cfg.workers, seed=cfg.seed)
    pio.write_g2o_edges(paths.constraints_raw, constraints)
    lines = ["i,j,rms_residual"]
    lines += [f"{c.i},{c.j},{pio.FMT % c.rms_residual}" for c in constraints]
    paths.register_meta.write_text("\n".join(lines) + "\n")


def stage_filter(cfg: RunConfig, paths: RunPaths) -> None:
    _, odometry = pio.read_tum(paths.odometry)
    constraints = pio.read_g2o_edges(paths.constraints_raw)
    kept, rejected = filter_constraints(constraints, odometry, cfg.filter)
    pio.write_g2o_edges(paths.constraints, kept)
    from .edges import discrepancy, relative_from_odometry
    lines = ["i,j,status,reason,trans_m,rot_deg"]
    rows = [(c, "kept", "") for c in kept] + \
           [(c, "rejected", why) for c, why in rejected]
    rows.sort(key=lambda r: (r[0].i, r[0].j))
    for c, status, why in rows:
        t, r = discrepancy(c.relative,
                           relative_from_odometry(odometry, c.i, c.j))
        lines.append(f"{c.i},{c.j},{status},{why},{pio.FMT % t},{pio.FMT % r}")
    paths.filter_report.write_text("\n".join(lines) + "\n")


def _load_stationary(paths: RunPaths):
    intervals = []
    for ln, line in enumerate(paths.stationary.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("start"):
            continue
        a, b = line.split(",")
        intervals.append(StationaryInterval(int(a), int(b)))
    return intervals


def _detect_stationary(cfg: RunConfig, paths: RunPaths):
    """Intersect IMU quiet intervals with near-zero odometry steps.

    Either cue alone over-triggers: noiseless IMU cannot tell rest from a
    constant-velocity cruise, and odometry alone flags the still moments at
    waypoint turns. The intersection with a span floor keeps only true rests.
    """
    samples = pio.read_imu_csv(paths.imu)
    stamps, odometry = pio.read_tum(paths.odometry)
    st = cfg.stationary
    time_intervals = detect_stationary_imu(samples, window=st.window,
                                           gyro_thresh=st.gyro_thresh,
                                           accel_dev_thresh=st.accel_dev_thresh)
    imu_iv = intervals_to_pose_indices(time_intervals, stamps)
    odo_iv = detect_stationary_icp(odometry,
                                   motion_thresh_trans=st.odometry_trans_thresh,
                                   motion_thresh_rot=st.odometry_rot_thresh)
    return intersect_intervals(imu_iv, odo_iv, min_length=st.min_span)


def _segment_imu(samples, stamps):
    """Slice the sample list per inter-pose interval (boundaries included)."""
    ts = np.array([s.timestamp for s in samples])
    starts = np.searchsorted(ts, np.asarray(stamps) - 1e-9)
    chunks = []
    for k in range(len(stamps) - 1):
        lo, hi = starts[k], starts[k + 1]
        chunks.append(samples[lo:hi + 1])
    return chunks


def build_graph(cfg: RunConfig, paths: RunPaths):
    """Assemble the factor graph from the durable artifacts.

    Returns (graph, stamps); the graph already has stationary aliasing and
    zero-velocity priors applied.
    """
    stamps, odometry = pio.read_tum(paths.odometry)
    constraints = pio.read_g2o_edges(paths.constraints)
    intervals = _load_stationary(paths)
    n = len(odometry)
    g = cfg.graph

    graph = FactorGraph()
    for k, pose in enumerate(odometry):
        graph.add_pose(k, pose)

    anchor_info = np.diag([1.0 / g.prior_sigma_rot ** 2] * 3
                          + [1.0 / g.prior_sigma_trans ** 2] * 3)
    graph.add_factor(PriorPose(pose_id(0), odometry[0], anchor_info))

    rot_sig = g.odom_sigma_rot
    if rot_sig is None:
        rot_sig = np.deg2rad(cfg.simulate.drift_rot)
    trans_sig = g.odom_sigma_trans
    if trans_sig is None:
        trans_sig = cfg.simulate.drift_trans
    odom_info = np.diag([1.0 / rot_sig ** 2] * 3 + [1.0 / trans_sig ** 2] * 3)
    from .edges import relative_from_odometry
    for k in range(n - 1):
        graph.add_factor(BetweenPose(pose_id(k), pose_id(k + 1),
                                     relative_from_odometry(odometry, k, k + 1),
                                     odom_info))

    for c in constraints:
        info = np.linalg.inv(c.covariance)
        graph.add_factor(BetweenPose(pose_id(c.i), pose_id(c.j), c.relative,
                                     0.5 * (info + info.T),
                                     huber_delta=g.huber_delta))

    if g.use_imu:
        samples = pio.read_imu_csv(paths.imu)
        segments = assign_bias_segments(intervals, n)
        n_segments = int(segments.max()) + 1
        positions = np.array([p.trans for p in odometry])
        velocities = np.gradient(positions, np.asarray(stamps), axis=0)
        for k in range(n):
            graph.add_velocity(k, velocities[k])
        for s in range(n_segments):
            graph.add_bias(s, ImuBias())

        bias_info = np.eye(6) / g.bias_prior_sigma ** 2
        for s in range(n_segments):
            graph.add_factor(BiasPrior(bias_id(s), ImuBias(), bias_info))
        walk_info = np.eye(6) / g.bias_walk_sigma ** 2
        for s in range(n_segments - 1):
            graph.add_factor(BetweenBias(bias_id(s), bias_id(s + 1), walk_info))

        noise = ImuNoise()
        for k, chunk in enumerate(_segment_imu(samples, stamps)):
            if len(chunk) < 2:
                raise ValueError(f"no IMU samples between poses {k} and {k+1}")
            pre = preintegrate(chunk, ImuBias(), noise)
            seg = int(segments[k])
            graph.add_factor(ImuFactor(pose_id(k), velocity_id(k),
                                       pose_id(k + 1), velocity_id(k + 1),
                                       bias_id(seg), pre))

    return alias_stationary(graph, intervals), stamps


def stage_build(cfg: RunConfig, paths: RunPaths) -> None:
    intervals = _detect_stationary(cfg, paths)
    lines = ["start_index,end_index"]
    lines += [f"{iv.start_index},{iv.end_index}" for iv in intervals]
    paths.stationary.write_text("\n".join(lines) + "\n")

    stamps, _ = pio.read_tum(paths.odometry)
    segments = assign_bias_segments(intervals, len(stamps))
    seg_lines = ["pose_index,segment"]
    seg_lines += [f"{k},{int(s)}" for k, s in enumerate(segments)]
    paths.bias_segments.write_text("\n".join(seg_lines) + "\n")

    graph, _ = build_graph(cfg, paths)
    from .graph import export_g2o
    paths.graph.write_text(export_g2o(graph))
    by_type: dict = {}
    for f in graph.factors:
        by_type[type(f).__name__] = by_type.get(type(f).__name__, 0) + 1
    _write_json(paths.graph_summary, {
        "num_variables": len(graph.variables()),
        "num_pose_variables": sum(1 for v in graph.variables()
                                  if v.kind == "pose"),
        "factors": by_type,
        "stationary_intervals": len(intervals),
        "bias_segments": int(segments.max()) + 1,
    })


def stage_optimize(cfg: RunConfig, paths: RunPaths) -> None:
    graph, stamps = build_graph(cfg, paths)
    params = OptimizeParams(max_iterations=cfg.optimizer.max_iterations,
                            tolerance=cfg.optimizer.tolerance,
                            lambda_init=cfg.optimizer.lambda_init,
                            lambda_factor=cfg.optimizer.lambda_factor)
    solution, stats = optimize(graph, params)
    trajectory = graph.trajectory(solution, count=len(stamps))
    pio.write_tum(paths.optimized, stamps, trajectory)
    from .graph import export_g2o
    paths.optimized_g2o.write_text(export_g2o(graph, solution))
    _write_json(paths.optimize_stats, {
        "iterations": stats.iterations,
        "initial_chi2": stats.initial_chi2,
        "final_chi2": stats.final_chi2,
        "converged": stats.converged,
        "chi2_trace": stats.chi2_trace,
        "lambda_trace": stats.lambda_trace,
    })


def stage_evaluate(cfg: RunConfig, paths: RunPaths,
                   timings: dict | None = None) -> EvalReport:
    gt_stamps, gt = pio.read_tum(paths.gt)
    odo_stamps, odometry = pio.read_tum(paths.odometry)
    opt_stamps, optimized = pio.read_tum(paths.optimized)

    ate_opt = evaluate_ate(optimized, gt, opt_stamps, gt_stamps)
    ate_odo = evaluate_ate(odometry, gt, odo_stamps, gt_stamps)
    rpe_trans, rpe_rot = {}, {}
    for delta in cfg.evaluation.rpe_deltas:
        t, r = evaluate_rpe(optimized, gt, delta)
        rpe_trans[str(delta)] = t
        rpe_rot[str(delta)] = r

    kept = rejected = 0
    reasons: dict = {}
    for ln, line in enumerate(paths.filter_report.read_text().splitlines(), 1):
        if ln == 1 or not line.strip():
            continue
        parts = line.split(",")
        if parts[2] == "kept":
            kept += 1
        else:
            rejected += 1
            reasons[parts[3]] = reasons.get(parts[3], 0) + 1

    report = EvalReport(ate_rmse=ate_opt, odometry_ate_rmse=ate_odo,
                        rpe_trans=rpe_trans, rpe_rot=rpe_rot,
                        kept_edges=kept, rejected_edges=rejected,
                        reject_reasons=reasons, timings=dict(timings or {}))

    _write_json(paths.report, {
        "ate_rmse": ate_opt,
        "odometry_ate_rmse": ate_odo,
        "ate_ratio": ate_opt / ate_odo if ate_odo > 0 else float("nan"),
        "rpe_trans": rpe_trans,
        "rpe_rot": rpe_rot,
        "kept_edges": kept,
        "rejected_edges": rejected,
        "reject_reasons": reasons,
    })
    rows = ["metric,value",
            f"ate_rmse,{pio.FMT % ate_opt}",
            f"odometry_ate_rmse,{pio.FMT % ate_odo}"]
    for delta in cfg.evaluation.rpe_deltas:
        rows.append(f"rpe_trans_{delta},{pio.FMT % rpe_trans[str(delta)]}")
        rows.append(f"rpe_rot_{delta},{pio.FMT % rpe_rot[str(delta)]}")
    rows += [f"kept_edges,{kept}", f"rejected_edges,{rejected}"]
    paths.metrics.write_text("\n".join(rows) + "\n")

    if timings is not None:
        _write_json(paths.timings, {k: round(v, 3) for k, v in timings.items()})

    from .report import render_figures
    render_figures(cfg, paths)
    return report


def stage_covis(cfg: RunConfig, paths: RunPaths) -> None:
    """Score kept constraints for cross-pose camera co-visibility."""
    _, odometry = pio.read_tum(paths.odometry)
    constraints = pio.read_g2o_edges(paths.constraints)
    rig = pio.read_rig(paths.rig)
    scans = pio.ScanDirectory(paths.scans)
    matrices = []
    for c in constraints:
        matrices.append(proxy_correspondences(
            scans[c.i], scans[c.j], c.relative, odometry[c.i], rig,
            pair_max_dist=cfg.covis.pair_max_dist, indices=(c.i, c.j)))
    rows = select_image_pairs(matrices, cfg.covis.min_count)
    pio.write_covis_csv(paths.covis, rows)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _stage_outputs(paths: RunPaths) -> dict:
    return {
        "simulate": [paths.gt, paths.odometry, paths.imu, paths.rig,
                     paths.scans / "scan_00000.ply"],
        "propose": [paths.candidates],
        "register": [paths.constraints_raw, paths.register_meta],
        "filter": [paths.constraints, paths.filter_report],
        "build": [paths.stationary, paths.bias_segments, paths.graph,
                  paths.graph_summary],
        "optimize": [paths.optimized, paths.optimized_g2o,
                     paths.optimize_stats],
        "evaluate": [paths.report, paths.metrics],
    }


_STAGE_FUNCS = {
    "simulate": stage_simulate,
    "propose": stage_propose,
    "register": stage_register,
    "filter": stage_filter,
    "build": stage_build,
    "optimize": stage_optimize,
    "covis": stage_covis,
}


def run_stage(name: str, cfg: RunConfig, paths: RunPaths | None = None):
    if paths is None:
        paths = RunPaths(cfg)
    paths.out.mkdir(parents=True, exist_ok=True)
    if name == "evaluate":
        return stage_evaluate(cfg, paths)
    func = _STAGE_FUNCS[name]
    try:
        return func(cfg, paths)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, str(exc)) from exc


def run_pipeline(cfg: RunConfig, resume: bool = False) -> EvalReport:
    """Execute every stage in order; returns the evaluation report.

    With ``resume`` set, stages whose outputs already exist are skipped.
    """
    paths = RunPaths(cfg)
    paths.out.mkdir(parents=True, exist_ok=True)
    outputs = _stage_outputs(paths)
    timings: dict = {}
    report = None
    for name in RUN_STAGES:
        if resume and all(p.exists() for p in outputs[name]):
            log.info("stage %s: outputs present, skipping", name)
            continue
        log.info("stage %s: running", name)
        start = time.perf_counter()
        try:
            if name == "evaluate":
                report = stage_evaluate(cfg, paths, timings)
            else:
                _STAGE_FUNCS[name](cfg, paths)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
        timings[name] = time.perf_counter() - start
    if report is None:
        report = stage_evaluate(cfg, paths, timings)
    return report
