"""Lift 2D-2D query/database matches to 2D-3D query/world correspondences.

Three strategies:
  * individual — every database feature with valid depth yields its own 3D point;
  * merge — candidates sharing one query feature are fused into a single point
    by MSAC-like consensus plus least-squares refinement;
  * triangulate — a depth-free baseline that intersects the database rays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geom import (NEAR_PLANE, CameraIntrinsics, Pose, project, project_many,
                   unproject_many)
from .mesh import DepthMap, lookup_depth_many

# Query features are grouped by coordinate equality after this quantization.
# Detector-based features repeat coordinates exactly; detector-free ones
# rarely group, which simply leaves their matches unmerged.
GROUP_QUANT_PX = 1e-3

# Gates for the triangulation baseline: ungated DLT produces unusable far points.
MIN_TRIANGULATION_ANGLE_DEG = 1.0
TRIANGULATION_RESIDUAL_FACTOR = 3.0


@dataclass(frozen=True)
class Match2D2D:
    """A feature match from the query image into one database view."""

    query_pt: np.ndarray    # (2,) undistorted query pixels
    db_image: str
    db_pt: np.ndarray       # (2,) database pixels
    score: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "query_pt", np.asarray(self.query_pt, dtype=np.float64))
        object.__setattr__(self, "db_pt", np.asarray(self.db_pt, dtype=np.float64))


@dataclass(frozen=True)
class Match2D3D:
    """A query pixel paired with a world point and the observations supporting it."""

    query_pt: np.ndarray    # (2,)
    world_pt: np.ndarray    # (3,) meters
    sources: tuple          # ((db_image, db_pt), ...), nonempty

    def __post_init__(self):
        object.__setattr__(self, "query_pt", np.asarray(self.query_pt, dtype=np.float64))
        object.__setattr__(self, "world_pt", np.asarray(self.world_pt, dtype=np.float64))
        if len(self.sources) == 0:
            raise ValueError("Match2D3D needs at least one source observation")


@dataclass(frozen=True)
class DatabaseView:
    """Pose, intrinsics and (when lifted through depth) the rendered depth map."""

    pose: Pose
    camera: CameraIntrinsics
    depth: DepthMap | None = None


def _quantize(pt: np.ndarray) -> tuple[int, int]:
    return (int(round(pt[0] / GROUP_QUANT_PX)), int(round(pt[1] / GROUP_QUANT_PX)))


def group_matches(matches: Sequence[Match2D2D]) -> list[list[Match2D2D]]:
    """Group matches by identical query feature, ordered by query coordinates."""
    groups: dict[tuple[int, int], list[Match2D2D]] = {}
    for m in matches:
        groups.setdefault(_quantize(m.query_pt), []).append(m)
    return [groups[k] for k in sorted(groups)]


def lift_individual(matches: Sequence[Match2D2D],
                    views: Mapping[str, DatabaseView]) -> tuple[list[Match2D3D], int]:
    """Lift each match through its database depth map.

    Returns (lifted matches in input order, count of matches dropped for
    invalid depth). Raises KeyError for an unregistered database image and
    ValueError when a needed view has no depth map.
    """
    by_image: dict[str, list[int]] = {}
    for i, m in enumerate(matches):
        if m.db_image not in views:
            raise KeyError(f"unknown database image {m.db_image!r}")
        by_image.setdefault(m.db_image, []).append(i)

    out: list[Match2D3D | None] = [None] * len(matches)
    dropped = 0
    for image, idxs in by_image.items():
        view = views[image]
        if view.depth is None:
            raise ValueError(f"database view {image!r} has no depth map")
        pts = np.array([matches[i].db_pt for i in idxs])
        depths, ok = lookup_depth_many(view.depth, pts)
        dropped += int(np.count_nonzero(~ok))
        if not ok.any():
            continue
        world = unproject_many(view.pose, view.camera, pts[ok], depths[ok].astype(np.float64))
        for row, i in enumerate(np.asarray(idxs)[ok]):
            m = matches[i]
            out[i] = Match2D3D(m.query_pt, world[row], ((m.db_image, m.db_pt),))
    return [m for m in out if m is not None], dropped


def _source_residuals(point: np.ndarray, sources: Sequence[tuple],
                      views: Mapping[str, DatabaseView]) -> np.ndarray:
    """Reprojection distance of one world point against each (db_image, db_pt); inf if behind."""
    res = np.empty(len(sources))
    for j, (image, pt) in enumerate(sources):
        view = views[image]
        proj = project(view.pose, view.camera, point)
        res[j] = np.inf if proj is None else float(np.linalg.norm(proj - pt))
    return res


def refine_point(x0: np.ndarray, observations: Sequence[tuple[Pose, CameraIntrinsics, np.ndarray]],
                 max_iterations: int = 50, rel_tol: float = 1e-10) -> np.ndarray:
    """Levenberg-Marquardt refinement of a 3D point under squared reprojection error.

    Damping starts at 1e-3, x10 on a rejected step, x0.1 on an accepted one;
    stops on relative cost change below rel_tol. A step that pushes the point
    behind any observing camera is rejected. Never returns a point with higher
    cost than the input.
    """
    x = np.asarray(x0, dtype=np.float64).copy()

    def cost_of(pt):
        total = 0.0
        for pose, cam, obs in observations:
            xc = pose.transform(pt)
            if xc[2] <= NEAR_PLANE:
                return np.inf
            du = cam.fx * xc[0] / xc[2] + cam.cx - obs[0]
            dv = cam.fy * xc[1] / xc[2] + cam.cy - obs[1]
            total += du * du + dv * dv
        return total

    cost = cost_of(x)
    if not np.isfinite(cost):
        return x
    lam = 1e-3
    for _ in range(max_iterations):
        jtj = np.zeros((3, 3))
        jte = np.zeros(3)
        for pose, cam, obs in observations:
            xc = pose.transform(x)
            z = xc[2]
            e = np.array([cam.fx * xc[0] / z + cam.cx - obs[0],
                          cam.fy * xc[1] / z + cam.cy - obs[1]])
            # d(pix)/d(xc) chained with d(xc)/d(x) = R
            jproj = np.array([[cam.fx / z, 0.0, -cam.fx * xc[0] / (z * z)],
                              [0.0, cam.fy / z, -cam.fy * xc[1] / (z * z)]])
            jac = jproj @ pose.rotation
            jtj += jac.T @ jac
            jte += jac.T @ e
        accepted = False
        for _ in range(12):
            damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                step = np.linalg.solve(damped, -jte)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_cost = cost_of(x + step)
            if new_cost < cost:
                x = x + step
                improvement = cost - new_cost
                cost = new_cost
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted or cost == 0.0 or improvement < rel_tol * cost:
            break
    return x


def merge_matches(candidates: Sequence[Match2D3D], views: Mapping[str, DatabaseView],
                  inlier_px: float) -> list[Match2D3D]:
    """Fuse the lifted candidates of one query feature into a single 2D-3D match.

    Every candidate point is scored with the MSAC cost sum(min(r^2, t^2)) of
    its reprojection residuals against all source features in the group. The
    best-scoring candidate, if it has at least two inliers, is refined by
    least squares over those inliers and returned alone; otherwise all
    candidates are returned unchanged.
    """
    if len(candidates) == 0:
        return []
    sources = [s for cand in candidates for s in cand.sources]
    t2 = inlier_px * inlier_px
    best_idx, best_score, best_res = -1, np.inf, None
    for i, cand in enumerate(candidates):
        res = _source_residuals(cand.world_pt, sources, views)
        score = float(np.sum(np.minimum(res * res, t2)))
        if score < best_score:
            best_idx, best_score, best_res = i, score, res
    inlier_mask = best_res <= inlier_px
    if np.count_nonzero(inlier_mask) < 2:
        return list(candidates)
    inlier_sources = [s for s, keep in zip(sources, inlier_mask) if keep]
    obs = [(views[img].pose, views[img].camera, pt) for img, pt in inlier_sources]
    refined = refine_point(candidates[best_idx].world_pt, obs)
    return [Match2D3D(candidates[best_idx].query_pt, refined, tuple(inlier_sources))]


def _ray_through(view: DatabaseView, pt: np.ndarray) -> np.ndarray:
    cam = view.camera
    d = np.array([(pt[0] - cam.cx) / cam.fx, (pt[1] - cam.cy) / cam.fy, 1.0])
    d = view.pose.rotation.T @ d
    return d / np.linalg.norm(d)


def lift_triangulate(group: Sequence[Match2D2D], views: Mapping[str, DatabaseView],
                     inlier_px: float) -> Match2D3D | None:
    """Triangulate one query feature's 3D point from its database observations.

    Returns None when the group spans fewer than two database images, when
    all ray pairs are closer than the degenerate-angle gate, when the DLT
    point lands behind a source camera, or when any source residual exceeds
    3x the inlier threshold.
    """
    images = {m.db_image for m in group}
    if len(images) < 2:
        return None
    rays = np.stack([_ray_through(views[m.db_image], m.db_pt) for m in group])
    cos_max = np.cos(np.radians(MIN_TRIANGULATION_ANGLE_DEG))
    best = 1.0
    for i in range(len(group)):
        for j in range(i + 1, len(group)):
            if group[i].db_image != group[j].db_image:
                best = min(best, abs(float(rays[i] @ rays[j])))
    if best > cos_max:
        return None

    rows = []
    for m in group:
        view = views[m.db_image]
        r, t = view.pose.rotation, -view.pose.rotation @ view.pose.center
        p = view.camera.k @ np.hstack([r, t[:, None]])
        rows.append(m.db_pt[0] * p[2] - p[0])
        rows.append(m.db_pt[1] * p[2] - p[1])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    hom = vt[-1]
    if abs(hom[3]) < 1e-12 * np.linalg.norm(hom[:3]):
        return None
    x = hom[:3] / hom[3]

    obs = [(views[m.db_image].pose, views[m.db_image].camera, m.db_pt) for m in group]
    x = refine_point(x, obs)

    for m in group:
        view = views[m.db_image]
        if view.pose.transform(x)[2] <= NEAR_PLANE:
            return None
    res = _source_residuals(x, [(m.db_image, m.db_pt) for m in group], views)
    if np.any(res > TRIANGULATION_RESIDUAL_FACTOR * inlier_px):
        return None
    return Match2D3D(group[0].query_pt, x, tuple((m.db_image, m.db_pt) for m in group))
