"""Text file formats shared with common localization tooling.

  * database views: `name qw qx qy qz tx ty tz CAMERA_MODEL w h params...`
  * query cameras:  `name CAMERA_MODEL w h params...`
  * retrieval pairs: `query_name db_name`
  * matches, one file per pair named `<query>__<db>.txt`:
    header `# qx qy dx dy [score]`, one match per line
  * poses: `name qw qx qy qz tx ty tz`

Rotations are stored in the projective convention (quaternion of the
world-to-camera rotation, t = -R @ c). Floats are written with enough digits
to round-trip float64 exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geom import (CameraIntrinsics, Pose, pose_from_projective, pose_to_projective,
                   quat_to_rotation, rotation_to_quat)

_F = "{:.17g}"

CAMERA_MODELS = {
    "SIMPLE_PINHOLE": 3,  # f cx cy
    "PINHOLE": 4,         # fx fy cx cy
    "SIMPLE_RADIAL": 4,   # f cx cy k
    "RADIAL": 5,          # f cx cy k1 k2
}


def _fmt(values) -> str:
    return " ".join(_F.format(float(v)) for v in values)


def parse_camera(model: str, width: int, height: int, params: list[float]) -> CameraIntrinsics:
    if model not in CAMERA_MODELS:
        raise ValueError(f"unsupported camera model {model!r}; known: {sorted(CAMERA_MODELS)}")
    if len(params) != CAMERA_MODELS[model]:
        raise ValueError(f"{model} expects {CAMERA_MODELS[model]} params, got {len(params)}")
    if model == "SIMPLE_PINHOLE":
        f, cx, cy = params
        return CameraIntrinsics(f, f, cx, cy, width, height)
    if model == "PINHOLE":
        fx, fy, cx, cy = params
        return CameraIntrinsics(fx, fy, cx, cy, width, height)
    if model == "SIMPLE_RADIAL":
        f, cx, cy, k = params
        return CameraIntrinsics(f, f, cx, cy, width, height, distortion=(k,))
    f, cx, cy, k1, k2 = params
    return CameraIntrinsics(f, f, cx, cy, width, height, distortion=(k1, k2))


def format_camera(cam: CameraIntrinsics) -> str:
    if cam.distortion:
        if cam.fx != cam.fy:
            raise ValueError("radial models assume a single focal length")
        if len(cam.distortion) == 1:
            return f"SIMPLE_RADIAL {cam.width} {cam.height} " + _fmt(
                [cam.fx, cam.cx, cam.cy, cam.distortion[0]])
        return f"RADIAL {cam.width} {cam.height} " + _fmt(
            [cam.fx, cam.cx, cam.cy, *cam.distortion])
    if cam.fx == cam.fy:
        return f"SIMPLE_PINHOLE {cam.width} {cam.height} " + _fmt([cam.fx, cam.cx, cam.cy])
    return f"PINHOLE {cam.width} {cam.height} " + _fmt([cam.fx, cam.fy, cam.cx, cam.cy])


def _data_lines(path):
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def read_db_views(path) -> dict[str, tuple[Pose, CameraIntrinsics]]:
    views: dict[str, tuple[Pose, CameraIntrinsics]] = {}
    for lineno, line in _data_lines(path):
        tok = line.split()
        if len(tok) < 11:
            raise ValueError(f"{path}:{lineno}: expected "
                             "'name qw qx qy qz tx ty tz MODEL w h params...'")
        name = tok[0]
        qvals = [float(v) for v in tok[1:5]]
        tvals = [float(v) for v in tok[5:8]]
        model = tok[8]
        width, height = int(tok[9]), int(tok[10])
        params = [float(v) for v in tok[11:]]
        pose = pose_from_projective(quat_to_rotation(np.array(qvals)), np.array(tvals))
        views[name] = (pose, parse_camera(model, width, height, params))
    return views


def write_db_views(path, views: dict[str, tuple[Pose, CameraIntrinsics]]) -> None:
    with open(path, "w") as f:
        for name in views:
            pose, cam = views[name]
            rot, t = pose_to_projective(pose)
            q = rotation_to_quat(rot)
            f.write(f"{name} {_fmt(q)} {_fmt(t)} {format_camera(cam)}\n")


def read_query_cameras(path) -> dict[str, CameraIntrinsics]:
    cams: dict[str, CameraIntrinsics] = {}
    for lineno, line in _data_lines(path):
        tok = line.split()
        if len(tok) < 4:
            raise ValueError(f"{path}:{lineno}: expected 'name MODEL w h params...'")
        cams[tok[0]] = parse_camera(tok[1], int(tok[2]), int(tok[3]),
                                    [float(v) for v in tok[4:]])
    return cams


def write_query_cameras(path, cams: dict[str, CameraIntrinsics]) -> None:
    with open(path, "w") as f:
        for name, cam in cams.items():
            f.write(f"{name} {format_camera(cam)}\n")


def read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in _data_lines(path):
        tok = line.split()
        if len(tok) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'query_name db_name'")
        pairs.append((tok[0], tok[1]))
    return pairs


def write_pairs(path, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w") as f:
        for q, db in pairs:
            f.write(f"{q} {db}\n")


def match_file_name(query: str, db: str) -> str:
    return f"{query}__{db}.txt"


def read_match_file(path) -> np.ndarray:
    """Match rows as an (N, 4) or (N, 5) array: qx qy dx dy [score]."""
    rows = []
    width = None
    for lineno, line in _data_lines(path):
        vals = [float(v) for v in line.split()]
        if len(vals) not in (4, 5):
            raise ValueError(f"{path}:{lineno}: expected 4 or 5 numbers, got {len(vals)}")
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ValueError(f"{path}:{lineno}: inconsistent column count")
        rows.append(vals)
    return np.asarray(rows, dtype=np.float64).reshape(-1, width or 4)


def write_match_file(path, rows: np.ndarray) -> None:
    rows = np.atleast_2d(rows)
    header = "# qx qy dx dy score" if rows.shape[1] == 5 else "# qx qy dx dy"
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(_fmt(row) + "\n")


def read_poses(path) -> dict[str, Pose]:
    poses: dict[str, Pose] = {}
    for lineno, line in _data_lines(path):
        tok = line.split()
        if len(tok) != 8:
            raise ValueError(f"{path}:{lineno}: expected 'name qw qx qy qz tx ty tz'")
        q = np.array([float(v) for v in tok[1:5]])
        t = np.array([float(v) for v in tok[5:8]])
        poses[tok[0]] = pose_from_projective(quat_to_rotation(q), t)
    return poses


def write_poses(path, poses: dict[str, Pose]) -> None:
    """Write poses sorted by image name in the submission convention."""
    with open(path, "w") as f:
        for name in sorted(poses):
            rot, t = pose_to_projective(poses[name])
            q = rotation_to_quat(rot)
            f.write(f"{name} {_fmt(q)} {_fmt(t)}\n")
