"""Camera models, pose representation and the projection primitives shared by all stages.

Conventions:
  * A pose is (R, c): R maps world to camera coordinates, c is the camera
    center in world coordinates, so x_cam = R @ (x - c). The projective
    (R, t) form with t = -R @ c appears only at file boundaries.
  * Pixel coordinates are continuous; the center of pixel (i, j) is at
    (i + 0.5, j + 0.5). All projected coordinates are undistorted unless
    stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Points with camera-frame depth at or below this are treated as behind the camera.
NEAR_PLANE = 1e-4

_ROT_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    if (isinstance(a, np.ndarray) and a.dtype == np.float64
            and not a.flags.writeable and a.flags.c_contiguous):
        return a  # already frozen; reuse so derived poses share storage
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid camera pose: world-to-camera rotation and camera center in meters."""

    rotation: np.ndarray  # (3, 3), orthonormal, det +1
    center: np.ndarray    # (3,)

    def __post_init__(self):
        R = _readonly(self.rotation)
        c = _readonly(self.center)
        if R.shape != (3, 3) or c.shape != (3,):
            raise ValueError(f"bad pose shapes {R.shape}, {c.shape}")
        if not np.all(np.abs(R @ R.T - np.eye(3)) < _ROT_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) >= _ROT_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", c)

    def transform(self, x: np.ndarray) -> np.ndarray:
        """World point(s) (..., 3) to camera frame."""
        return (np.asarray(x, dtype=np.float64) - self.center) @ self.rotation.T

    def inverse_transform(self, x: np.ndarray) -> np.ndarray:
        """Camera-frame point(s) (..., 3) to world."""
        return np.asarray(x, dtype=np.float64) @ self.rotation + self.center

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with up to two radial distortion coefficients (k1, k2)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple[float, ...] = ()

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if len(self.distortion) > 2:
            raise ValueError("only 1-2 radial coefficients are supported")
        object.__setattr__(self, "distortion", tuple(float(k) for k in self.distortion))

    @property
    def k(self) -> np.ndarray:
        """3x3 calibration matrix."""
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PoseError:
    position_m: float
    rotation_deg: float


def project(pose: Pose, cam: CameraIntrinsics, x: np.ndarray) -> np.ndarray | None:
    """Project a world point to undistorted pixel coordinates.

    Returns None when the camera-frame depth is at or below the near plane.
    """
    xc = pose.transform(x)
    if xc[2] <= NEAR_PLANE:
        return None
    return np.array([cam.fx * xc[0] / xc[2] + cam.cx, cam.fy * xc[1] / xc[2] + cam.cy])


def project_many(pose: Pose, cam: CameraIntrinsics, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) world points.

    Returns ((N, 2) pixels, (N,) validity). Invalid rows hold NaN.
    """
    xc = pose.transform(np.atleast_2d(xs))
    z = xc[:, 2]
    valid = z > NEAR_PLANE
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([cam.fx * xc[:, 0] / z + cam.cx, cam.fy * xc[:, 1] / z + cam.cy], axis=1)
    uv[~valid] = np.nan
    return uv, valid


def unproject(pose: Pose, cam: CameraIntrinsics, p: np.ndarray, depth: float) -> np.ndarray:
    """World point on the ray through undistorted pixel p at camera-frame depth (meters)."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    p = np.asarray(p, dtype=np.float64)
    xc = np.array([(p[0] - cam.cx) / cam.fx * depth, (p[1] - cam.cy) / cam.fy * depth, depth])
    return pose.inverse_transform(xc)


def unproject_many(pose: Pose, cam: CameraIntrinsics, pts: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vectorized unprojection of (N, 2) pixels with (N,) positive depths."""
    pts = np.atleast_2d(pts)
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise ValueError("depths must be positive")
    xc = np.stack(
        [(pts[:, 0] - cam.cx) / cam.fx * depths, (pts[:, 1] - cam.cy) / cam.fy * depths, depths],
        axis=1,
    )
    return pose.inverse_transform(xc)


def distort_points(cam: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Apply the forward radial model x_d = x_u * (1 + k1 r^2 + k2 r^4) in pixel coordinates."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if not cam.distortion:
        return pts.copy()
    k1 = cam.distortion[0]
    k2 = cam.distortion[1] if len(cam.distortion) > 1 else 0.0
    xn = (pts[:, 0] - cam.cx) / cam.fx
    yn = (pts[:, 1] - cam.cy) / cam.fy
    r2 = xn * xn + yn * yn
    f = 1.0 + k1 * r2 + k2 * r2 * r2
    return np.stack([cam.fx * xn * f + cam.cx, cam.fy * yn * f + cam.cy], axis=1)


def undistort_points(cam: CameraIntrinsics, pts: np.ndarray, max_iterations: int = 100,
                     tol: float = 1e-10) -> np.ndarray:
    """Invert the radial distortion model by fixed-point iteration.

    Identity when the camera carries no distortion coefficients. Raises
    ValueError if the iteration has not converged to `tol` (in normalized
    image coordinates) after `max_iterations` rounds, which signals
    pathological coefficients for the given points.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if not cam.distortion:
        return pts.copy()
    k1 = cam.distortion[0]
    k2 = cam.distortion[1] if len(cam.distortion) > 1 else 0.0
    xd = (pts[:, 0] - cam.cx) / cam.fx
    yd = (pts[:, 1] - cam.cy) / cam.fy
    xu, yu = xd.copy(), yd.copy()
    for _ in range(max_iterations):
        r2 = xu * xu + yu * yu
        f = 1.0 + k1 * r2 + k2 * r2 * r2
        xn, yn = xd / f, yd / f
        delta = max(np.max(np.abs(xn - xu)), np.max(np.abs(yn - yu)))
        xu, yu = xn, yn
        if delta < tol:
            return np.stack([cam.fx * xu + cam.cx, cam.fy * yu + cam.cy], axis=1)
    raise ValueError(
        f"undistortion did not converge within {max_iterations} iterations "
        f"(last delta {delta:.3e}); distortion coefficients look pathological"
    )


def pose_error(est: Pose, gt: Pose) -> PoseError:
    """Position error in meters and rotation error in degrees between two poses."""
    dpos = float(np.linalg.norm(est.center - gt.center))
    tr = np.trace(gt.rotation @ est.rotation.T)
    ang = np.degrees(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))
    return PoseError(position_m=dpos, rotation_deg=float(ang))


def rotation_angle_rad(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, radians."""
    tr = np.trace(r_a @ r_b.T)
    return float(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def pose_to_projective(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) with t = -R @ c."""
    return pose.rotation.copy(), -pose.rotation @ pose.center


def pose_from_projective(rotation: np.ndarray, t: np.ndarray) -> Pose:
    """Pose from projective (R, t): c = -R^T @ t."""
    rotation = np.asarray(rotation, dtype=np.float64)
    return Pose(rotation, -rotation.T @ np.asarray(t, dtype=np.float64))


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from quaternion (w, x, y, z); the quaternion is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(rotation: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) with w >= 0 from a rotation matrix."""
    m = np.asarray(rotation, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD; fixes accumulated drift."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r
