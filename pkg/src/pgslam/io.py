"""File formats shared across the pipeline.

- point clouds: ASCII PLY (x y z [nx ny nz]) and plain XYZ text
- trajectories: TUM (timestamp tx ty tz qx qy qz qw)
- pose graphs / constraints: g2o VERTEX_SE3:QUAT and EDGE_SE3:QUAT lines
- IMU streams: CSV (timestamp, wx, wy, wz, ax, ay, az)
- edge candidates and covisibility counts: CSV

All floats are written with 17 significant digits so that write -> read ->
write is byte-stable. g2o information matrices are stored in the usual
translation-then-rotation tangent order; in-memory matrices use this
package's rotation-first order, so readers and writers permute blocks.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud, Pose3

FMT = "%.17g"


class ParseError(ValueError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


def _fmt(values) -> str:
    return " ".join(FMT % v for v in values)


# block permutation between internal [rot, trans] and g2o [trans, rot] order
_P_FILE_FROM_INT = np.zeros((6, 6))
_P_FILE_FROM_INT[:3, 3:] = np.eye(3)
_P_FILE_FROM_INT[3:, :3] = np.eye(3)


def reorder_to_file(m: np.ndarray) -> np.ndarray:
    return _P_FILE_FROM_INT @ m @ _P_FILE_FROM_INT.T


def reorder_to_internal(m: np.ndarray) -> np.ndarray:
    # the permutation is its own inverse
    return _P_FILE_FROM_INT @ m @ _P_FILE_FROM_INT.T


# ---------------------------------------------------------------------------
# point clouds

def write_ply(path, cloud: PointCloud) -> None:
    with_normals = cloud.normals is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += [f"property double {ax}" for ax in "xyz"]
    if with_normals:
        lines += [f"property double n{ax}" for ax in "xyz"]
    lines.append("end_header")
    for i in range(len(cloud)):
        row = list(cloud.points[i])
        if with_normals:
            row += list(cloud.normals[i])
        lines.append(_fmt(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    n_vertex = None
    props = []
    body_at = None
    for ln, line in enumerate(text, start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "end_header":
            body_at = ln
            break
        if tok[0] == "element" and len(tok) == 3 and tok[1] == "vertex":
            try:
                n_vertex = int(tok[2])
            except ValueError:
                raise ParseError(path, ln,
                                 f"bad vertex count {tok[2]!r}") from None
        elif tok[0] == "property" and len(tok) == 3:
            props.append(tok[2])
    if body_at is None or n_vertex is None:
        raise ParseError(path, len(text), "missing PLY header or vertex count")
    if props[:3] != ["x", "y", "z"]:
        raise ParseError(path, body_at, f"unsupported PLY properties {props}")
    with_normals = props[3:6] == ["nx", "ny", "nz"]
    rows = []
    for ln, line in enumerate(text[body_at:], start=body_at + 1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split()])
        except ValueError:
            raise ParseError(path, ln, f"bad vertex line: {line!r}") from None
    if len(rows) != n_vertex:
        raise ParseError(path, len(text), f"expected {n_vertex} vertices, found {len(rows)}")
    data = np.asarray(rows, dtype=float).reshape(n_vertex, len(props))
    normals = data[:, 3:6] if with_normals else None
    return PointCloud(data[:, :3], normals)


def write_xyz(path, cloud: PointCloud) -> None:
    Path(path).write_text("".join(_fmt(p) + "\n" for p in cloud.points))


def read_xyz(path) -> PointCloud:
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 3:
            raise ParseError(path, ln, f"expected 3 columns, got {len(tok)}")
        try:
            rows.append([float(v) for v in tok])
        except ValueError:
            raise ParseError(path, ln, f"bad point line: {line!r}") from None
    return PointCloud(np.asarray(rows, dtype=float).reshape(-1, 3))


# ---------------------------------------------------------------------------
# trajectories (TUM)

def write_tum(path, timestamps, poses) -> None:
    lines = []
    for t, p in zip(timestamps, poses):
        q = p.quat
        lines.append(_fmt([t, *p.trans, q[0], q[1], q[2], q[3]]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path):
    """Returns (timestamps array, list of Pose3)."""
    stamps, poses = [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 8:
            raise ParseError(path, ln, f"expected 8 columns, got {len(tok)}")
        try:
            vals = [float(v) for v in tok]
        except ValueError:
            raise ParseError(path, ln, f"bad trajectory line: {line!r}") from None
        stamps.append(vals[0])
        poses.append(Pose3(np.array(vals[4:8]), np.array(vals[1:4])))
    return np.asarray(stamps), poses


# ---------------------------------------------------------------------------
# g2o records

def format_vertex_line(vid: int, pose: Pose3) -> str:
    q = pose.quat
    return f"VERTEX_SE3:QUAT {vid} " + _fmt([*pose.trans, q[0], q[1], q[2], q[3]])


def format_edge_line(i: int, j: int, pose: Pose3, information: np.ndarray) -> str:
    """EDGE_SE3:QUAT with the 21 upper-triangular information entries.

    ``information`` is in internal rotation-first order and is written in the
    g2o translation-first order.
    """
    info = reorder_to_file(information)
    upper = [info[r, c] for r in range(6) for c in range(r, 6)]
    q = pose.quat
    return (f"EDGE_SE3:QUAT {i} {j} "
            + _fmt([*pose.trans, q[0], q[1], q[2], q[3]]) + " " + _fmt(upper))


def parse_g2o(path_or_text, path_label="<string>"):
    """Parse g2o text into (vertices: {id: Pose3}, edges: list of dicts).

    Each edge dict has keys i, j, pose, information (internal order).
    Unknown record types raise; malformed lines carry their line number.
    """
    if isinstance(path_or_text, (str, Path)) and "\n" not in str(path_or_text):
        path = Path(path_or_text)
        text = path.read_text()
        label = path
    else:
        text = str(path_or_text)
        label = path_label
    vertices: dict[int, Pose3] = {}
    edges = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tok = line.split()
        kind = tok[0]
        try:
            if kind == "VERTEX_SE3:QUAT":
                if len(tok) != 9:
                    raise ValueError(f"expected 9 tokens, got {len(tok)}")
                vid = int(tok[1])
                vals = [float(v) for v in tok[2:]]
                vertices[vid] = Pose3(np.array(vals[3:7]), np.array(vals[0:3]))
            elif kind == "EDGE_SE3:QUAT":
                if len(tok) != 31:
                    raise ValueError(f"expected 31 tokens, got {len(tok)}")
                i, j = int(tok[1]), int(tok[2])
                vals = [float(v) for v in tok[3:]]
                pose = Pose3(np.array(vals[3:7]), np.array(vals[0:3]))
                info = np.zeros((6, 6))
                k = 7
                for r in range(6):
                    for c in range(r, 6):
                        info[r, c] = info[c, r] = vals[k]
                        k += 1
                edges.append({"i": i, "j": j, "pose": pose,
                              "information": reorder_to_internal(info)})
            else:
                raise ValueError(f"unknown record type {kind!r}")
        except ParseError:
            raise
        except ValueError as e:
            raise ParseError(label, ln, str(e)) from None
    return vertices, edges


def write_g2o_edges(path, constraints) -> None:
    """Persist ICP constraints as EDGE_SE3:QUAT lines (information = cov^-1)."""
    lines = [format_edge_line(c.i, c.j, c.relative, np.linalg.inv(c.covariance))
             for c in constraints]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# IMU CSV

def write_imu_csv(path, samples) -> None:
    lines = ["timestamp,wx,wy,wz,ax,ay,az"]
    for s in samples:
        row = [s.timestamp, *s.angular_velocity, *s.linear_acceleration]
        lines.append(",".join(FMT % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_imu_csv(path):
    from .imu import ImuSample

    samples = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if ln == 1 and line.lower().startswith("timestamp"):
            continue
        tok = line.split(",")
        if len(tok) != 7:
            raise ParseError(path, ln, f"expected 7 columns, got {len(tok)}")
        try:
            vals = [float(v) for v in tok]
        except ValueError:
            raise ParseError(path, ln, f"bad IMU line: {line!r}") from None
        samples.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return samples


# ---------------------------------------------------------------------------
# rig calibration

def write_rig(path, rig) -> None:
    lines = ["# fx fy cx cy width height tx ty tz qx qy qz qw"]
    for cam, pose in rig.cameras:
        q = pose.quat
        lines.append(_fmt([cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                           *pose.trans, q[0], q[1], q[2], q[3]]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_rig(path):
    from .covis import PinholeCamera, RigCalibration

    cameras = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 13:
            raise ParseError(path, ln, f"expected 13 columns, got {len(tok)}")
        try:
            vals = [float(v) for v in tok]
        except ValueError:
            raise ParseError(path, ln, f"bad rig line: {line!r}") from None
        cam = PinholeCamera(fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                            width=int(vals[4]), height=int(vals[5]))
        pose = Pose3(np.array(vals[9:13]), np.array(vals[6:9]))
        cameras.append((cam, pose))
    return RigCalibration(cameras)


# ---------------------------------------------------------------------------
# small CSVs

def write_candidates_csv(path, candidates) -> None:
    lines = ["i,j"] + [f"{c.i},{c.j}" for c in candidates]
    Path(path).write_text("\n".join(lines) + "\n")


def read_candidates_csv(path):
    from .edges import EdgeCandidate

    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or (ln == 1 and line.startswith("i,")):
            continue
        tok = line.split(",")
        if len(tok) != 2:
            raise ParseError(path, ln, f"expected 2 columns, got {len(tok)}")
        out.append(EdgeCandidate(int(tok[0]), int(tok[1])))
    return out


def write_covis_csv(path, rows) -> None:
    """rows: iterable of (pose_i, cam_a, pose_j, cam_b, count)."""
    lines = ["pose_i,cam_a,pose_j,cam_b,count"]
    lines += [",".join(str(int(v)) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Lazy scan source
# ---------------------------------------------------------------------------

class ScanDirectory:
    """Indexed, lazily-loaded PLY scans named scan_00000.ply, scan_00001.ply...

    Picklable, so worker processes can open files themselves instead of
    receiving clouds over the wire.
    """

    def __init__(self, root, pattern: str = "scan_{:05d}.ply"):
        self.root = Path(root)
        self.pattern = pattern

    def path_for(self, index: int) -> Path:
        return self.root / self.pattern.format(index)

    def exists(self, index: int) -> bool:
        return self.path_for(index).is_file()

    def __getitem__(self, index: int):
        path = self.path_for(index)
        if not path.is_file():
            raise FileNotFoundError(f"missing scan file {path}")
        return read_ply(path)

    def __len__(self) -> int:
        count = 0
        while self.exists(count):
            count += 1
        return count


def read_g2o_edges(path):
    """Read EDGE_SE3:QUAT lines back into IcpConstraint objects.

    The stored information matrix is inverted to recover the covariance;
    rms_residual is not persisted in g2o and comes back as 0.
    """
    from .edges import IcpConstraint

    _, edges = parse_g2o(path)
    out = []
    for e in edges:
        cov = np.linalg.inv(e["information"])
        out.append(IcpConstraint(e["i"], e["j"], e["pose"],
                                 0.5 * (cov + cov.T), 0.0))
    return out
