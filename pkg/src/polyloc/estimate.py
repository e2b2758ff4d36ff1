"""Robust absolute-pose estimation.

P3P minimal solver (quartic-resultant formulation with Gauss-Newton depth
polishing), LO-RANSAC with MSAC scoring and Cauchy-loss refinement, on-the-fly
covisibility components, and grid-based position averaging.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geom import NEAR_PLANE, CameraIntrinsics, Pose, orthonormalize, rotation_angle_rad
from .lift import Match2D3D, _quantize

# Reprojection contract every returned P3P solution must satisfy.
P3P_ANGLE_TOL_RAD = 1e-6
_P3P_DEDUP_TOL = 1e-8
_COLLINEAR_SIN_TOL = 1e-9

# Hypotheses generated and scored per batch; fixed so runs are reproducible.
_RANSAC_CHUNK = 1024
# Bound on elements of the (poses x matches) residual matrix per scoring block.
_SCORE_BLOCK_ELEMS = 4_000_000


@dataclass(frozen=True)
class RansacConfig:
    inlier_px: float
    min_iterations: int = 10_000
    max_iterations: int = 100_000
    confidence: float = 0.9999
    seed: int = 0
    cauchy_scale_px: float | None = None  # defaults to inlier_px
    lo_refine_every_best: bool = True

    def __post_init__(self):
        if not (0 < self.min_iterations <= self.max_iterations):
            raise ValueError("need 0 < min_iterations <= max_iterations")
        if self.inlier_px <= 0:
            raise ValueError("inlier_px must be positive")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")

    @property
    def cauchy_scale(self) -> float:
        return self.inlier_px if self.cauchy_scale_px is None else self.cauchy_scale_px


@dataclass(frozen=True)
class AveragingConfig:
    """Grid for position averaging: cube of side 2*d_vol sampled every d_step."""

    d_vol: float = 1.0
    d_step: float = 0.25

    def __post_init__(self):
        if not (0 < self.d_step <= 2 * self.d_vol):
            raise ValueError("need 0 < d_step <= 2 * d_vol")


# Defaults matching the position thresholds the grids were sized against.
CITY_SCALE_AVERAGING = AveragingConfig(d_vol=1.0, d_step=0.25)
ROOM_SCALE_AVERAGING = AveragingConfig(d_vol=0.25, d_step=0.05)


@dataclass(frozen=True)
class LocalizationResult:
    pose: Pose
    inliers: np.ndarray      # indices into the input match list
    msac_score: float
    component_id: int = 0
    num_iterations: int = 0


# ---------------------------------------------------------------------------
# P3P

def _quartic_roots(coeffs: np.ndarray) -> np.ndarray:
    """Roots of batched quartics coeffs (B, 5), highest power first -> (B, 4) complex.

    Rows with a (near-)vanishing leading coefficient degenerate to lower
    degree and are solved individually with trimmed coefficients.
    """
    b = coeffs.shape[0]
    roots = np.full((b, 4), np.nan + 0j, dtype=np.complex128)
    scale = np.max(np.abs(coeffs), axis=1)
    scale[scale == 0] = 1.0
    degenerate = np.abs(coeffs[:, 0]) < 1e-12 * scale
    normal = ~degenerate
    if normal.any():
        q = coeffs[normal] / coeffs[normal, 0:1]
        comp = np.zeros((len(q), 4, 4))
        comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
        comp[:, :, 3] = -q[:, [4, 3, 2, 1]]
        roots[normal] = np.linalg.eigvals(comp)
    for i in np.nonzero(degenerate)[0]:
        r = np.roots(np.trim_zeros(coeffs[i], "f"))
        roots[i, :len(r)] = r[:4]
    return roots


def p3p_batch(bearings: np.ndarray, points: np.ndarray
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve the perspective-3-point problem for a batch of minimal samples.

    bearings: (B, 3, 3) unit direction vectors in the camera frame (rows),
    points:   (B, 3, 3) matching world points (rows).

    Returns (rotations (B, 4, 3, 3), centers (B, 4, 3), valid (B, 4)). Every
    valid solution reprojects all three points onto their bearings within
    P3P_ANGLE_TOL_RAD; invalid slots are unconstrained. Duplicates are not
    removed here.
    """
    bearings = np.asarray(bearings, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    b1, b2, b3 = bearings[:, 0], bearings[:, 1], bearings[:, 2]
    p1, p2, p3 = points[:, 0], points[:, 1], points[:, 2]

    sq_a = np.sum((p2 - p3) ** 2, axis=1)  # side opposite point 1
    sq_b = np.sum((p1 - p3) ** 2, axis=1)
    sq_c = np.sum((p1 - p2) ** 2, axis=1)
    ca = np.sum(b2 * b3, axis=1)
    cb = np.sum(b1 * b3, axis=1)
    cg = np.sum(b1 * b2, axis=1)

    cross = np.cross(p2 - p1, p3 - p1)
    denom = np.sqrt(sq_c * sq_b)
    with np.errstate(divide="ignore", invalid="ignore"):
        sin_area = np.linalg.norm(cross, axis=1) / denom
    usable = (denom > 0) & (sin_area > _COLLINEAR_SIN_TOL)

    # Quartic in v = s3/s1 obtained as the resultant of the two ratio equations;
    # coefficients generated symbolically once and transcribed verbatim.
    A, B, C = sq_a, sq_b, sq_c
    q4 = A**2 - 2*A*B - 2*A*C + B**2 - 4*B*C*ca**2 + 2*B*C + C**2
    q3 = (-4*A**2*cb + 4*A*B*ca*cg + 4*A*B*cb + 8*A*C*cb - 4*B**2*ca*cg
          + 8*B*C*ca**2*cb + 4*B*C*ca*cg - 4*B*C*cb - 4*C**2*cb)
    q2 = (4*A**2*cb**2 + 2*A**2 - 8*A*B*ca*cb*cg - 4*A*B*cg**2 - 8*A*C*cb**2
          - 4*A*C + 4*B**2*ca**2 + 4*B**2*cg**2 - 2*B**2 - 4*B*C*ca**2
          - 8*B*C*ca*cb*cg + 4*C**2*cb**2 + 2*C**2)
    q1 = (-4*A**2*cb + 4*A*B*ca*cg + 8*A*B*cb*cg**2 - 4*A*B*cb + 8*A*C*cb
          - 4*B**2*ca*cg + 4*B*C*ca*cg + 4*B*C*cb - 4*C**2*cb)
    q0 = A**2 - 4*A*B*cg**2 + 2*A*B - 2*A*C + B**2 - 2*B*C + C**2
    coeffs = np.stack([q4, q3, q2, q1, q0], axis=1)
    coeffs[~usable] = np.array([1.0, 0, 0, 0, 1.0])  # rootless placeholder

    vs = _quartic_roots(coeffs)
    v = np.where(np.abs(vs.imag) <= 1e-6 * (1.0 + np.abs(vs.real)), vs.real, np.nan)

    A_, B_, C_ = A[:, None], B[:, None], C[:, None]
    ca_, cb_, cg_ = ca[:, None], cb[:, None], cg[:, None]
    k2 = 1.0 + v * v - 2.0 * v * cb_
    with np.errstate(divide="ignore", invalid="ignore"):
        # linear elimination of u between the two ratio equations
        u = (B_ * (1.0 - v * v) + (A_ - C_) * k2) / (2.0 * B_ * (cg_ - v * ca_))
        # fall back to the quadratic branch of eq. (3)/(2) when that is ill-posed
        disc = cg_ * cg_ - (B_ - C_ * k2) / B_
        bad_u = ~np.isfinite(u)
        if bad_u.any():
            root = np.sqrt(np.maximum(disc, 0.0))
            for sign in (1.0, -1.0):
                cand = cg_ + sign * root
                # residual of the remaining equation decides the branch
                res_new = np.abs(B_ * (cand**2 + v*v - 2*cand*v*ca_) - A_ * k2)
                res_old = np.abs(B_ * (u**2 + v*v - 2*u*v*ca_) - A_ * k2)
                take = bad_u & (disc >= 0) & (~np.isfinite(u) | (res_new < res_old))
                u = np.where(take, cand, u)
        s1 = np.sqrt(np.where(k2 > 0, B_ / np.where(k2 > 0, k2, 1.0), np.nan))
    valid = usable[:, None] & np.isfinite(u) & np.isfinite(v) & np.isfinite(s1) & (v > 0) & (u > 0)
    s = np.stack([s1, u * s1, v * s1], axis=-1)  # (B, 4, 3)
    s = np.where(valid[..., None], s, 1.0)

    # Gauss-Newton polish of the depth triple on the three distance equations
    cos_t = np.stack([np.broadcast_to(ca_, v.shape), np.broadcast_to(cb_, v.shape),
                      np.broadcast_to(cg_, v.shape)], axis=-1)
    abc = np.stack([np.broadcast_to(A_, v.shape), np.broadcast_to(B_, v.shape),
                    np.broadcast_to(C_, v.shape)], axis=-1)
    for _ in range(8):
        f = np.stack([
            s[..., 1]**2 + s[..., 2]**2 - 2*s[..., 1]*s[..., 2]*cos_t[..., 0] - abc[..., 0],
            s[..., 0]**2 + s[..., 2]**2 - 2*s[..., 0]*s[..., 2]*cos_t[..., 1] - abc[..., 1],
            s[..., 0]**2 + s[..., 1]**2 - 2*s[..., 0]*s[..., 1]*cos_t[..., 2] - abc[..., 2],
        ], axis=-1)
        jac = np.zeros(s.shape[:-1] + (3, 3))
        jac[..., 0, 1] = 2*s[..., 1] - 2*s[..., 2]*cos_t[..., 0]
        jac[..., 0, 2] = 2*s[..., 2] - 2*s[..., 1]*cos_t[..., 0]
        jac[..., 1, 0] = 2*s[..., 0] - 2*s[..., 2]*cos_t[..., 1]
        jac[..., 1, 2] = 2*s[..., 2] - 2*s[..., 0]*cos_t[..., 1]
        jac[..., 2, 0] = 2*s[..., 0] - 2*s[..., 1]*cos_t[..., 2]
        jac[..., 2, 1] = 2*s[..., 1] - 2*s[..., 0]*cos_t[..., 2]
        solvable = np.abs(np.linalg.det(jac)) > 1e-300
        step = np.zeros_like(s)
        if solvable.any():
            step[solvable] = np.linalg.solve(jac[solvable], f[solvable][..., None])[..., 0]
        s = s - np.where(valid[..., None], step, 0.0)
    valid &= np.all(s > 0, axis=-1) & np.all(np.isfinite(s), axis=-1)
    s = np.where(valid[..., None], s, 1.0)

    # absolute orientation (Kabsch) world -> camera
    cam_pts = s[..., :, None] * bearings[:, None, :, :]       # (B, 4, 3, 3)
    pm = points.mean(axis=1)                                  # (B, 3)
    qm = cam_pts.mean(axis=2)                                 # (B, 4, 3)
    pc = points - pm[:, None, :]
    qc = cam_pts - qm[:, :, None, :]
    cov = np.einsum("bix,bkiy->bkxy", pc, qc)
    uu, _, vvt = np.linalg.svd(cov)
    vv = np.swapaxes(vvt, -1, -2)
    uut = np.swapaxes(uu, -1, -2)
    det = np.linalg.det(vv @ uut)
    fix = np.zeros_like(cov)
    fix[..., 0, 0] = fix[..., 1, 1] = 1.0
    fix[..., 2, 2] = det
    rot = vv @ fix @ uut                                      # (B, 4, 3, 3)
    t = qm - np.einsum("bkxy,by->bkx", rot, pm)
    center = -np.einsum("bkyx,bky->bkx", rot, t)

    # enforce the reprojection contract
    rel = points[:, None, :, :] - center[:, :, None, :]
    cam_dir = np.einsum("bkxy,bkiy->bkix", rot, rel)
    norms = np.linalg.norm(cam_dir, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cosang = np.sum(cam_dir * bearings[:, None], axis=-1) / norms
    ang = np.arccos(np.clip(cosang, -1.0, 1.0))
    valid &= np.all(norms > 0, axis=-1) & np.all(ang < P3P_ANGLE_TOL_RAD, axis=-1)
    valid &= np.all(np.isfinite(rot), axis=(-2, -1)) & np.all(np.isfinite(center), axis=-1)
    return rot, center, valid


def p3p(bearings: np.ndarray, points: np.ndarray) -> list[Pose]:
    """Camera poses consistent with three bearing/world-point correspondences.

    Up to four solutions; collinear world points yield an empty list.
    Solutions are deduplicated at 1e-8 in rotation angle and center distance.
    """
    bearings = np.asarray(bearings, dtype=np.float64).reshape(1, 3, 3)
    points = np.asarray(points, dtype=np.float64).reshape(1, 3, 3)
    rot, center, valid = p3p_batch(bearings, points)
    poses: list[Pose] = []
    for k in range(4):
        if not valid[0, k]:
            continue
        r, c = rot[0, k], center[0, k]
        dup = any(
            rotation_angle_rad(r, p.rotation) < _P3P_DEDUP_TOL
            and np.linalg.norm(c - p.center) < _P3P_DEDUP_TOL
            for p in poses
        )
        if not dup:
            poses.append(Pose(orthonormalize(r), c))
    return poses


# ---------------------------------------------------------------------------
# Scoring and refinement

def bearings_from_pixels(cam: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Unit camera-frame direction vectors for undistorted pixels (N, 2)."""
    pts = np.atleast_2d(pts)
    d = np.stack([(pts[:, 0] - cam.cx) / cam.fx, (pts[:, 1] - cam.cy) / cam.fy,
                  np.ones(len(pts))], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _residuals_sq(rot: np.ndarray, center: np.ndarray, world: np.ndarray,
                  query: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Squared reprojection residuals of one pose; inf for behind-camera points."""
    xc = (world - center) @ rot.T
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = cam.fx * xc[:, 0] / z + cam.cx - query[:, 0]
        dv = cam.fy * xc[:, 1] / z + cam.cy - query[:, 1]
    r2 = du * du + dv * dv
    r2[z <= NEAR_PLANE] = np.inf
    return r2


def _score_pose_block(rots: np.ndarray, centers: np.ndarray, world: np.ndarray,
                      query: np.ndarray, cam: CameraIntrinsics, t2: float) -> np.ndarray:
    """MSAC scores sum(min(r^2, t^2)) for (M, 3, 3)/(M, 3) poses over all matches."""
    m = len(rots)
    n = len(world)
    scores = np.empty(m)
    block = max(1, _SCORE_BLOCK_ELEMS // max(n, 1))
    for start in range(0, m, block):
        rs = rots[start:start + block]
        cs = centers[start:start + block]
        rt = rs.reshape(-1, 3).T                               # (3, 3*mb): columns are R rows
        w = (world @ rt).reshape(n, len(rs), 3)                # w[p, m] = R_m @ world_p
        rc = np.einsum("mxy,my->mx", rs, cs)
        x = w[..., 0] - rc[:, 0]
        y = w[..., 1] - rc[:, 1]
        z = w[..., 2] - rc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            np.divide(x, z, out=x)
            np.divide(y, z, out=y)
        x *= cam.fx
        x += cam.cx
        x -= query[:, 0:1]
        y *= cam.fy
        y += cam.cy
        y -= query[:, 1:2]
        x *= x
        y *= y
        x += y
        np.minimum(x, t2, out=x)
        x[(z <= NEAR_PLANE) | ~np.isfinite(x)] = t2
        scores[start:start + block] = x.sum(axis=0)
    return scores


def refine_pose_cauchy(pose: Pose, world: np.ndarray, query: np.ndarray,
                       cam: CameraIntrinsics, scale_px: float,
                       max_iterations: int = 50, rel_tol: float = 1e-10) -> Pose:
    """Levenberg-Marquardt pose refinement under the Cauchy loss.

    Minimizes sum of (s^2/2) * ln(1 + r^2/s^2) over the given correspondences
    with an IRLS Gauss-Newton approximation; the rotation update is a left
    exponential-map increment. Steps that do not reduce the cost are rejected,
    so the returned pose never has a higher Cauchy cost than the input.
    """
    rot = pose.rotation.copy()
    center = pose.center.copy()
    s2 = scale_px * scale_px

    def cost_of(r, c):
        r2 = _residuals_sq(r, c, world, query, cam)
        if not np.all(np.isfinite(r2)):
            return np.inf
        return float(np.sum(0.5 * s2 * np.log1p(r2 / s2)))

    cost = cost_of(rot, center)
    if not np.isfinite(cost):
        return pose
    lam = 1e-3
    for _ in range(max_iterations):
        xc = (world - center) @ rot.T
        z = xc[:, 2]
        u = cam.fx * xc[:, 0] / z + cam.cx
        v = cam.fy * xc[:, 1] / z + cam.cy
        err = np.stack([u - query[:, 0], v - query[:, 1]], axis=1)        # (N, 2)
        r2 = np.sum(err * err, axis=1)
        wgt = 1.0 / (1.0 + r2 / s2)                                       # IRLS Cauchy weight
        jp = np.zeros((len(world), 2, 3))
        jp[:, 0, 0] = cam.fx / z
        jp[:, 0, 2] = -cam.fx * xc[:, 0] / (z * z)
        jp[:, 1, 1] = cam.fy / z
        jp[:, 1, 2] = -cam.fy * xc[:, 1] / (z * z)
        # x_cam = exp([w]x) R (X - c - dc): d/dw = -[x_cam]x, d/dc = -R
        jx = np.zeros((len(world), 3, 6))
        jx[:, 0, 1] = xc[:, 2]
        jx[:, 0, 2] = -xc[:, 1]
        jx[:, 1, 0] = -xc[:, 2]
        jx[:, 1, 2] = xc[:, 0]
        jx[:, 2, 0] = xc[:, 1]
        jx[:, 2, 1] = -xc[:, 0]
        jx[:, :, 3:] = -np.broadcast_to(rot, (len(world), 3, 3))
        jac = np.einsum("nij,njk->nik", jp, jx)                           # (N, 2, 6)
        jw = jac * wgt[:, None, None]
        jtj = np.einsum("nij,nik->jk", jw, jac)
        jte = np.einsum("nij,ni->j", jw, err)
        accepted = False
        for _ in range(12):
            damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                step = np.linalg.solve(damped, -jte)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_rot = _exp_so3(step[:3]) @ rot
            new_center = center + step[3:]
            new_cost = cost_of(new_rot, new_center)
            if new_cost < cost:
                rot, center = new_rot, new_center
                improvement = cost - new_cost
                cost = new_cost
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted or cost == 0.0 or improvement < rel_tol * cost:
            break
    return Pose(orthonormalize(rot), center)


def _exp_so3(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + k
    return np.eye(3) + np.sin(theta) / theta * k + (1 - np.cos(theta)) / theta**2 * (k @ k)


# ---------------------------------------------------------------------------
# LO-RANSAC

def _sample_triples(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """(count, 3) distinct indices drawn uniformly, redrawing duplicate rows."""
    idx = rng.integers(0, n, size=(count, 3))
    while True:
        dup = (idx[:, 0] == idx[:, 1]) | (idx[:, 0] == idx[:, 2]) | (idx[:, 1] == idx[:, 2])
        if not dup.any():
            return idx
        idx[dup] = rng.integers(0, n, size=(int(dup.sum()), 3))


def _adaptive_budget(cfg: RansacConfig, inlier_ratio: float) -> int:
    if inlier_ratio <= 0.0:
        return cfg.max_iterations
    if inlier_ratio >= 1.0:
        needed = 0
    else:
        w3 = inlier_ratio**3
        needed = int(np.ceil(np.log(1.0 - cfg.confidence) / np.log(1.0 - w3))) if w3 < 1.0 else 0
    return int(min(max(cfg.min_iterations, needed), cfg.max_iterations))


def loransac_pose(matches: Sequence[Match2D3D], cam: CameraIntrinsics,
                  cfg: RansacConfig) -> LocalizationResult | None:
    """LO-RANSAC absolute pose from 2D-3D matches.

    Minimal P3P samples are scored with the MSAC cost over all matches; every
    new best hypothesis triggers a Cauchy-loss local optimization over its
    inliers, and the final best pose is refined the same way. Returns None
    with fewer than 4 matches or fewer than 4 final inliers. Deterministic
    for a fixed config (hypotheses are generated and scored in fixed-size
    batches, which keeps the draw sequence reproducible).
    """
    n = len(matches)
    if n < 4:
        return None
    world = np.array([m.world_pt for m in matches])
    query = np.array([m.query_pt for m in matches])
    bearings = bearings_from_pixels(cam, query)
    t = cfg.inlier_px
    t2 = t * t
    rng = np.random.default_rng(cfg.seed)

    best_score = np.inf
    best_rot: np.ndarray | None = None
    best_center: np.ndarray | None = None
    done = 0
    budget = _adaptive_budget(cfg, 0.0)

    def local_optimize(rot, center, score):
        r2 = _residuals_sq(rot, center, world, query, cam)
        inl = r2 <= t2
        if np.count_nonzero(inl) < 3:
            return rot, center, score
        refined = refine_pose_cauchy(Pose(orthonormalize(rot), center), world[inl],
                                     query[inl], cam, cfg.cauchy_scale)
        new_score = float(_score_pose_block(refined.rotation[None], refined.center[None],
                                            world, query, cam, t2)[0])
        if new_score < score:
            return refined.rotation, refined.center, new_score
        return rot, center, score

    while done < budget:
        chunk = min(_RANSAC_CHUNK, budget - done)
        samples = _sample_triples(rng, n, chunk)
        rot, center, valid = p3p_batch(bearings[samples], world[samples])
        flat = valid.reshape(-1)
        owners = np.repeat(np.arange(chunk), 4)[flat]
        cand_rot = rot.reshape(-1, 3, 3)[flat]
        cand_center = center.reshape(-1, 3)[flat]
        if len(cand_rot):
            scores = _score_pose_block(cand_rot, cand_center, world, query, cam, t2)
            iter_best = np.full(chunk, np.inf)
            np.minimum.at(iter_best, owners, scores)
            cummin = np.minimum.accumulate(iter_best)
            improving = np.nonzero(iter_best <= cummin)[0]
            for it in improving:
                if iter_best[it] >= best_score:
                    continue
                mask = owners == it
                k = np.nonzero(mask)[0][np.argmin(scores[mask])]
                best_rot, best_center = cand_rot[k], cand_center[k]
                best_score = scores[k]
                if cfg.lo_refine_every_best:
                    best_rot, best_center, best_score = local_optimize(
                        best_rot, best_center, best_score)
        done += chunk
        if best_rot is not None:
            ratio = float(np.count_nonzero(
                _residuals_sq(best_rot, best_center, world, query, cam) <= t2)) / n
            budget = _adaptive_budget(cfg, ratio)

    if best_rot is None:
        return None
    best_rot, best_center, best_score = local_optimize(best_rot, best_center, best_score)
    final = Pose(orthonormalize(best_rot), best_center)
    r2 = _residuals_sq(final.rotation, final.center, world, query, cam)
    inliers = np.nonzero(r2 <= t2)[0]
    if len(inliers) < 4:
        return None
    score = float(_score_pose_block(final.rotation[None], final.center[None],
                                    world, query, cam, t2)[0])
    return LocalizationResult(pose=final, inliers=inliers, msac_score=score,
                              component_id=0, num_iterations=done)


# ---------------------------------------------------------------------------
# Covisibility components

class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:  # path compression
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def covis_components(matches: Sequence[Match2D3D]) -> list[np.ndarray]:
    """Partition match indices by the on-the-fly covisibility graph.

    Database images are connected when one query feature matches into both
    (and through multi-source matches); each match joins the component of its
    source images. Components are ordered by their smallest match index.
    """
    images: list[str] = []
    image_id: dict[str, int] = {}
    for m in matches:
        for img, _ in m.sources:
            if img not in image_id:
                image_id[img] = len(images)
                images.append(img)
    uf = _UnionFind(len(images))
    for m in matches:
        ids = [image_id[img] for img, _ in m.sources]
        for other in ids[1:]:
            uf.union(ids[0], other)
    by_feature: dict[tuple[int, int], int] = {}
    for m in matches:
        key = _quantize(m.query_pt)
        first = image_id[m.sources[0][0]]
        if key in by_feature:
            uf.union(by_feature[key], first)
        else:
            by_feature[key] = first
    grouped: dict[int, list[int]] = {}
    for i, m in enumerate(matches):
        root = uf.find(image_id[m.sources[0][0]])
        grouped.setdefault(root, []).append(i)
    parts = sorted(grouped.values(), key=lambda idxs: idxs[0])
    return [np.asarray(p, dtype=np.int64) for p in parts]


def estimate_with_covisibility(matches: Sequence[Match2D3D], cam: CameraIntrinsics,
                               cfg: RansacConfig, use_filter: bool
                               ) -> LocalizationResult | None:
    """Pose estimation over all matches, or per covisibility component when filtering.

    With filtering on, each component with at least 4 matches is solved
    independently and the result with the most inliers wins; ties break on
    lower MSAC score, then lower component id.
    """
    if not use_filter:
        return loransac_pose(matches, cam, cfg)
    best: LocalizationResult | None = None
    for comp_id, idxs in enumerate(covis_components(matches)):
        if len(idxs) < 4:
            continue
        sub = [matches[i] for i in idxs]
        res = loransac_pose(sub, cam, cfg)
        if res is None:
            continue
        res = LocalizationResult(pose=res.pose, inliers=idxs[res.inliers],
                                 msac_score=res.msac_score, component_id=comp_id,
                                 num_iterations=res.num_iterations)
        if best is None or (len(res.inliers), -res.msac_score, -res.component_id) > \
                (len(best.inliers), -best.msac_score, -best.component_id):
            best = res
    return best


# ---------------------------------------------------------------------------
# Position averaging

def position_average(pose: Pose, matches: Sequence[Match2D3D], cam: CameraIntrinsics,
                     cfg: RansacConfig, avg: AveragingConfig) -> Pose:
    """Refine the camera center as an inlier-count-weighted average over a grid.

    Candidate centers sit on a regular grid with spacing d_step filling the
    cube of side 2*d_vol around the current center (boundary included); each
    is weighted by how many matches it keeps within the inlier threshold with
    the rotation unchanged. With no inliers anywhere the pose is returned
    untouched. The rotation is reused as-is.
    """
    if len(matches) == 0:
        return pose
    n_steps = int(np.floor(avg.d_vol / avg.d_step + 1e-9))
    axis = np.arange(-n_steps, n_steps + 1, dtype=np.float64) * avg.d_step
    ga, gb, gc = np.meshgrid(axis, axis, axis, indexing="ij")
    offsets = np.stack([ga.ravel(), gb.ravel(), gc.ravel()], axis=1)   # (G, 3)

    world = np.array([m.world_pt for m in matches])
    query = np.array([m.query_pt for m in matches])
    t2 = cfg.inlier_px**2
    base = (world - pose.center) @ pose.rotation.T                     # (N, 3)
    shift = offsets @ pose.rotation.T                                  # (G, 3)
    counts = np.empty(len(offsets), dtype=np.int64)
    block = max(1, _SCORE_BLOCK_ELEMS // max(len(world), 1))
    for start in range(0, len(offsets), block):
        xc = base[None, :, :] - shift[start:start + block, None, :]
        z = xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            du = cam.fx * xc[..., 0] / z + cam.cx - query[:, 0]
            dv = cam.fy * xc[..., 1] / z + cam.cy - query[:, 1]
        r2 = du * du + dv * dv
        ok = (z > NEAR_PLANE) & np.isfinite(r2) & (r2 <= t2)
        counts[start:start + block] = np.count_nonzero(ok, axis=1)

    total = counts.sum()
    if total == 0:
        return pose
    delta = (counts[:, None] * offsets).sum(axis=0) / total
    return Pose(pose.rotation, pose.center + delta)
