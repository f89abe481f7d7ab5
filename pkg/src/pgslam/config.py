"""Run configuration: one YAML file drives every pipeline stage."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .edges import ConstraintFilterParams
from .registration import RegistrationParams


@dataclass
class SimulateConfig:
    scene: str = "two_loop_circuit"
    drift_trans: float = 0.01       # meters per step
    drift_rot: float = 0.2          # degrees per step
    lidar_noise: float = 0.0        # range sigma, meters


@dataclass
class ProposeConfig:
    knn: int = 25
    gap_min: int = 5
    gap_max: int = 25
    loop_radius: float | None = 2.0


@dataclass
class StationaryConfig:
    window: float = 1.0             # seconds
    gyro_thresh: float = 0.02       # rad/s
    accel_dev_thresh: float = 0.05  # m/s^2
    # Odometry displacement gate intersected with the IMU intervals. On
    # noiseless IMU data a constant-velocity cruise is indistinguishable from
    # rest (zero gyro, zero specific-force deviation), so IMU quietness alone
    # over-segments badly; requiring near-zero odometry steps as well fixes it.
    odometry_trans_thresh: float = 0.08  # metres per step
    odometry_rot_thresh: float = 1.5     # degrees per step
    # Minimum span (end_index - start_index) of an intersected interval. The
    # eased trajectory is briefly near-still at every waypoint, which produces
    # spurious one- or two-step intervals; genuine rests span far more.
    min_span: int = 4


@dataclass
class OptimizerConfig:
    max_iterations: int = 50
    tolerance: float = 1e-9
    lambda_init: float = 1e-6
    lambda_factor: float = 10.0


@dataclass
class GraphConfig:
    prior_sigma_rot: float = 1e-4           # pose-0 anchor, radians
    prior_sigma_trans: float = 1e-4         # meters
    odom_sigma_rot: float | None = None     # defaults to simulate drift
    odom_sigma_trans: float | None = None
    bias_prior_sigma: float = 1e-2
    bias_walk_sigma: float = 1e-3
    use_imu: bool = True
    huber_delta: float | None = None


@dataclass
class CovisConfig:
    pair_max_dist: float = 0.05
    min_count: int = 1


@dataclass
class EvaluationConfig:
    rpe_deltas: tuple = (1, 10)


@dataclass
class RunConfig:
    output_dir: Path = Path("runs/out")
    seed: int = 0
    workers: int = 1
    scans_dir: Path | None = None           # default: output_dir / "scans"
    imu_csv: Path | None = None             # default: output_dir / "imu.csv"
    trajectory: Path | None = None          # odometry; default in output_dir
    rig: Path | None = None                 # rig calibration text file
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    propose: ProposeConfig = field(default_factory=ProposeConfig)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    filter: ConstraintFilterParams = field(default_factory=ConstraintFilterParams)
    stationary: StationaryConfig = field(default_factory=StationaryConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    covis: CovisConfig = field(default_factory=CovisConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def resolved_path(self, name: str) -> Path:
        """Explicit path if configured, else the output_dir convention."""
        value = getattr(self, name)
        if value is not None:
            return Path(value)
        defaults = {"scans_dir": "scans", "imu_csv": "imu.csv",
                    "trajectory": "odometry.txt", "rig": "rig.txt"}
        return Path(self.output_dir) / defaults[name]


def _build(cls, data, context):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValueError(f"{context}: expected a mapping, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            value = data[f.name]
            if f.name == "rpe_deltas" and value is not None:
                value = tuple(int(v) for v in value)
            kwargs[f.name] = value
    return cls(**kwargs)


_SECTIONS = {
    "simulate": SimulateConfig,
    "propose": ProposeConfig,
    "registration": RegistrationParams,
    "filter": ConstraintFilterParams,
    "stationary": StationaryConfig,
    "optimizer": OptimizerConfig,
    "graph": GraphConfig,
    "covis": CovisConfig,
    "evaluation": EvaluationConfig,
}

_PATHS = {"output_dir", "scans_dir", "imu_csv", "trajectory", "rig"}
_SCALARS = {"seed", "workers"}


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - set(_SECTIONS) - _PATHS - _SCALARS
    if unknown:
        raise ValueError(f"config: unknown top-level keys {sorted(unknown)}")
    cfg = RunConfig()
    for key in _PATHS:
        if key in data and data[key] is not None:
            setattr(cfg, key, Path(data[key]))
    for key in _SCALARS:
        if key in data:
            setattr(cfg, key, int(data[key]))
    for key, cls in _SECTIONS.items():
        setattr(cfg, key, _build(cls, data.get(key), key))
    cfg.output_dir = Path(cfg.output_dir)
    return cfg


def load_config(path) -> RunConfig:
    """Parse a YAML config file into a validated RunConfig."""
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config root must be a mapping")
    try:
        return config_from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from exc
