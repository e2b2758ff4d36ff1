"""Synthetic scenes and brute-force oracles standing in for datasets and learned matchers.

Scenes are closed axis-aligned rooms viewed from inside, which mirrors the
localization setting: every camera frustum hits geometry and depth maps are
fully covered. All generation is a pure function of (parameters, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import NEAR_PLANE, CameraIntrinsics, Pose, project_many, unproject_many
from .lift import Match2D2D
from .mesh import DepthMap, TriangleMesh, render_depth

# A lifted point counts as visible in a view when its camera depth matches the
# rendered depth map this closely; deliberately checked through the same
# depth-map path the pipeline uses rather than by ray casting. On top of the
# absolute floor, the check allows the depth variation across one pixel (the
# nearest-pixel lookup quantizes by that much on oblique surfaces).
VISIBILITY_DEPTH_TOL_M = 1e-3

# Inlier matches are additionally required to stay consistent with the ground
# truth pose at sub-pixel level once lifted through the database depth map.
GT_REPROJECTION_TOL_PX = 0.5


@dataclass(frozen=True)
class SceneParams:
    room_size: float = 6.0
    min_triangles: int = 200
    n_db_views: int = 10
    n_queries: int = 5
    image_width: int = 800
    image_height: int = 800
    focal_px: float = 800.0

    def __post_init__(self):
        if self.room_size <= 0:
            raise ValueError("room_size must be positive")
        if self.n_db_views < 1:
            raise ValueError("need at least one database view")
        if self.min_triangles < 12:
            raise ValueError("a closed box needs at least 12 triangles")


@dataclass(frozen=True)
class ViewSpec:
    pose: Pose
    camera: CameraIntrinsics


@dataclass(frozen=True)
class SyntheticScene:
    mesh: TriangleMesh
    db_views: tuple[ViewSpec, ...]
    gt_queries: tuple[ViewSpec, ...]
    seed: int
    _depth_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def db_depth(self, index: int) -> DepthMap:
        key = ("db", index)
        if key not in self._depth_cache:
            view = self.db_views[index]
            self._depth_cache[key] = render_depth(self.mesh, view.pose, view.camera)
        return self._depth_cache[key]

    def query_depth(self, index: int) -> DepthMap:
        key = ("q", index)
        if key not in self._depth_cache:
            view = self.gt_queries[index]
            self._depth_cache[key] = render_depth(self.mesh, view.pose, view.camera)
        return self._depth_cache[key]


def look_at(eye: np.ndarray, target: np.ndarray) -> Pose:
    """Pose at `eye` with the optical axis through `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    up_hint = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up_hint) > 0.99:
        up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(up_hint, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward]), eye)


def _room_mesh(size: float, min_triangles: int, rng: np.random.Generator) -> TriangleMesh:
    """Closed box [0, size]^3 with each face split into a k x k quad grid."""
    k = max(1, int(np.ceil(np.sqrt(min_triangles / 12.0))))
    verts: list[np.ndarray] = []
    tris: list[tuple[int, int, int]] = []
    lin = np.linspace(0.0, size, k + 1)
    for fixed_axis in range(3):
        for side in (0.0, size):
            base = len(verts)
            free = [a for a in range(3) if a != fixed_axis]
            for a in lin:
                for b in lin:
                    p = np.empty(3)
                    p[fixed_axis] = side
                    p[free[0]] = a
                    p[free[1]] = b
                    verts.append(p)
            for r in range(k):
                for c in range(k):
                    v00 = base + r * (k + 1) + c
                    v01 = v00 + 1
                    v10 = v00 + (k + 1)
                    v11 = v10 + 1
                    tris.append((v00, v01, v11))
                    tris.append((v00, v11, v10))
    vertices = np.asarray(verts)
    colors = rng.uniform(0.0, 1.0, size=(len(vertices), 3))
    ao = rng.uniform(0.2, 1.0, size=len(vertices))
    return TriangleMesh(vertices, np.asarray(tris), vertex_colors=colors, vertex_ao=ao)


def _sample_views(params: SceneParams, count: int, walls: list[int],
                  rng: np.random.Generator) -> tuple[ViewSpec, ...]:
    """Views from inside the room aimed at the given walls (0..5, axis*2+side)."""
    cam = CameraIntrinsics(
        fx=params.focal_px, fy=params.focal_px,
        cx=params.image_width / 2.0, cy=params.image_height / 2.0,
        width=params.image_width, height=params.image_height,
    )
    s = params.room_size
    views = []
    for wall in walls[:count]:
        eye = rng.uniform(0.3 * s, 0.7 * s, size=3)
        target = rng.uniform(0.25 * s, 0.75 * s, size=3)
        target[wall // 2] = float(wall % 2) * s
        views.append(ViewSpec(look_at(eye, target), cam))
    return tuple(views)


def generate_scene(params: SceneParams, seed: int) -> SyntheticScene:
    """Deterministic room scene with database and ground-truth query views inside it.

    Database views cover the walls round-robin so the whole room is mapped as
    far as the view budget allows; query views only target walls that at least
    one database view looks at, which keeps every query localizable.
    """
    rng = np.random.default_rng(seed)
    mesh = _room_mesh(params.room_size, params.min_triangles, rng)
    db_walls = [i % 6 for i in range(params.n_db_views)]
    db_views = _sample_views(params, params.n_db_views, db_walls, rng)
    covered = sorted(set(db_walls))
    query_walls = [covered[int(rng.integers(0, len(covered)))]
                   for _ in range(params.n_queries)]
    queries = _sample_views(params, params.n_queries, query_walls, rng)
    return SyntheticScene(mesh=mesh, db_views=db_views, gt_queries=queries, seed=seed)


def _pixel_depth_allowance(dm: DepthMap, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Local one-pixel depth variation at (ix, iy), per axis the smaller valid side."""
    d = dm.values
    center = d[iy, ix].astype(np.float64)

    def side(dx, dy):
        jx = np.clip(ix + dx, 0, dm.width - 1)
        jy = np.clip(iy + dy, 0, dm.height - 1)
        n = d[jy, jx].astype(np.float64)
        diff = np.abs(n - center)
        diff[n <= DepthMap.INVALID] = np.inf
        return diff

    ax = np.minimum(side(1, 0), side(-1, 0))
    ay = np.minimum(side(0, 1), side(0, -1))
    ax[~np.isfinite(ax)] = 0.0
    ay[~np.isfinite(ay)] = 0.0
    return ax + ay


def _visible_in_view(scene: SyntheticScene, view_index: int, points: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into a db view and check them against its depth map.

    Returns ((N, 2) pixels, (N,) visibility, (N,) stored depth at the
    containing pixel). A point is visible when its camera depth matches the
    stored value within VISIBILITY_DEPTH_TOL_M plus the local per-pixel
    quantization allowance.
    """
    view = scene.db_views[view_index]
    dm = scene.db_depth(view_index)
    uv, valid = project_many(view.pose, view.camera, points)
    z = view.pose.transform(points)[:, 2]
    vis = valid.copy()
    depth_at = np.zeros(len(points))
    idx = np.nonzero(valid)[0]
    if len(idx):
        ix = np.floor(uv[idx, 0]).astype(np.int64)
        iy = np.floor(uv[idx, 1]).astype(np.int64)
        inb = (ix >= 0) & (iy >= 0) & (ix < dm.width) & (iy < dm.height)
        ok = inb.copy()
        sub = np.nonzero(inb)[0]
        stored = dm.values[iy[sub], ix[sub]].astype(np.float64)
        tol = VISIBILITY_DEPTH_TOL_M + _pixel_depth_allowance(dm, ix[sub], iy[sub])
        ok[sub] = (stored > DepthMap.INVALID) & (np.abs(stored - z[idx][sub]) <= tol)
        vis[idx] = ok
        depth_at[idx[sub]] = stored
    return uv, vis, depth_at


def _surface_points_from_query(scene: SyntheticScene, query_idx: int, count: int,
                               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample pixel centers of the query depth map and lift them to world points."""
    view = scene.gt_queries[query_idx]
    dm = scene.query_depth(query_idx)
    ix = rng.integers(0, dm.width, size=count)
    iy = rng.integers(0, dm.height, size=count)
    depths = dm.values[iy, ix].astype(np.float64)
    good = depths > DepthMap.INVALID
    centers = np.stack([ix[good] + 0.5, iy[good] + 0.5], axis=1).astype(np.float64)
    world = unproject_many(view.pose, view.camera, centers, depths[good])
    return centers, world


@dataclass(frozen=True)
class CovisiblePoint:
    """A query-visible surface point with its database observations.

    query_px is the exact (noise-free) query projection; observations hold
    (db view index, exact db pixel, depth-map value at its containing pixel).
    """

    query_px: np.ndarray
    world: np.ndarray
    observations: tuple[tuple[int, np.ndarray, float], ...]


def _candidate_points(scene: SyntheticScene, query_idx: int,
                      rng: np.random.Generator, batch: int) -> list[CovisiblePoint]:
    """One sampling round of surface points with their db-view observations."""
    qview = scene.gt_queries[query_idx]
    centers, world = _surface_points_from_query(scene, query_idx, batch, rng)
    if len(world) == 0:
        return []
    obs_per_point: list[list] = [[] for _ in range(len(world))]
    for j in range(len(scene.db_views)):
        view = scene.db_views[j]
        uv, vis, stored = _visible_in_view(scene, j, world)
        if vis.any():
            # the point the pipeline will lift for this observation must stay
            # consistent with the ground-truth pose at sub-pixel level
            sub = np.nonzero(vis)[0]
            lifted = unproject_many(view.pose, view.camera, uv[sub], stored[sub])
            reproj, pvalid = project_many(qview.pose, qview.camera, lifted)
            err = np.linalg.norm(reproj - centers[sub], axis=1)
            vis[sub] = pvalid & (err <= GT_REPROJECTION_TOL_PX)
        for i in np.nonzero(vis)[0]:
            obs_per_point[i].append((j, uv[i], float(stored[i])))
    return [CovisiblePoint(centers[i], world[i], tuple(obs))
            for i, obs in enumerate(obs_per_point) if obs]


def sample_covisible_points(scene: SyntheticScene, query_idx: int, count: int,
                            min_views: int, seed: int) -> list[CovisiblePoint]:
    """Surface points visible in the query and at least `min_views` db views.

    Raises RuntimeError when the scene cannot supply `count` such points
    within a bounded sampling effort.
    """
    rng = np.random.default_rng(seed)
    points: list[CovisiblePoint] = []
    for _ in range(80):
        for p in _candidate_points(scene, query_idx, rng, max(128, 2 * count)):
            if len(p.observations) >= min_views:
                points.append(p)
                if len(points) == count:
                    return points
    raise RuntimeError(f"found only {len(points)}/{count} points visible in "
                       f">= {min_views} database views")


def generate_matches(scene: SyntheticScene, query_idx: int, n_inliers: int,
                     n_outliers: int, noise_px: float, seed: int, *,
                     min_views_per_point: int = 1,
                     ) -> tuple[list[Match2D2D], Pose]:
    """Synth 2D-2D matches for one query plus its ground-truth pose.

    Inlier matches come from surface points visible both in the query and in
    at least `min_views_per_point` database views (checked through rendered
    depth); a point visible in several views contributes one match per view,
    all sharing a single noisy query endpoint. Outliers pair a real database
    observation with a uniformly random query endpoint. The output order is a
    seeded shuffle. Raises RuntimeError when the scene cannot supply enough
    co-visible points within a bounded sampling effort.
    """
    rng = np.random.default_rng(seed)
    qview = scene.gt_queries[query_idx]
    cam = qview.camera
    names = [db_image_name(j) for j in range(len(scene.db_views))]

    inlier_rows: list[Match2D2D] = []
    outlier_rows: list[Match2D2D] = []
    attempts = 0
    max_attempts = 80
    batch = max(128, 2 * n_inliers)
    need_outlier_points = n_outliers
    while (len(inlier_rows) < n_inliers or need_outlier_points > 0) and attempts < max_attempts:
        attempts += 1
        for point in _candidate_points(scene, query_idx, rng, batch):
            if len(inlier_rows) < n_inliers and len(point.observations) >= min_views_per_point:
                qpt = point.query_px
                if noise_px > 0:
                    qpt = qpt + rng.normal(0.0, noise_px, size=2)
                for j, dpt, _ in point.observations:
                    if len(inlier_rows) >= n_inliers:
                        break
                    if noise_px > 0:
                        dpt = dpt + rng.normal(0.0, noise_px, size=2)
                    inlier_rows.append(Match2D2D(qpt, names[j], dpt))
            elif need_outlier_points > 0:
                j, dpt, _ = point.observations[0]
                if noise_px > 0:
                    dpt = dpt + rng.normal(0.0, noise_px, size=2)
                qpt = rng.uniform([0.0, 0.0], [cam.width, cam.height])
                outlier_rows.append(Match2D2D(qpt, names[j], dpt))
                need_outlier_points -= 1
    if len(inlier_rows) < n_inliers or need_outlier_points > 0:
        raise RuntimeError(
            f"found only {len(inlier_rows)}/{n_inliers} inlier and "
            f"{n_outliers - need_outlier_points}/{n_outliers} outlier matches "
            f"after {attempts} sampling rounds"
        )
    rows = inlier_rows + outlier_rows
    order = rng.permutation(len(rows))
    return [rows[i] for i in order], qview.pose


def db_image_name(index: int) -> str:
    """Database-image id used for view `index` in generated matches and exports."""
    return f"db_{index:04d}"


# ---------------------------------------------------------------------------
# Brute-force ray-casting oracle

def raycast_depth(mesh: TriangleMesh, pose: Pose, cam: CameraIntrinsics) -> np.ndarray:
    """Exhaustive per-pixel ray/triangle intersection depth (float64 grid, 0.0 = miss).

    Independent of the rasterizer: every pixel ray is tested against every
    triangle with the Moller-Trumbore test and the nearest positive hit wins.
    """
    h, w = cam.height, cam.width
    us = (np.arange(w) + 0.5 - cam.cx) / cam.fx
    vs = (np.arange(h) + 0.5 - cam.cy) / cam.fy
    uu, vv = np.meshgrid(us, vs)
    dirs_cam = np.stack([uu.ravel(), vv.ravel(), np.ones(h * w)], axis=1)
    dirs = dirs_cam @ pose.rotation  # R^T applied row-wise
    origin = pose.center

    v0 = mesh.vertices[mesh.triangles[:, 0]]
    e1 = mesh.vertices[mesh.triangles[:, 1]] - v0
    e2 = mesh.vertices[mesh.triangles[:, 2]] - v0
    best = np.full(h * w, np.inf)
    block = max(1, 2_000_000 // max(len(v0), 1))
    for start in range(0, h * w, block):
        d = dirs[start:start + block]                       # (P, 3)
        pvec = np.cross(d[:, None, :], e2[None, :, :])      # (P, T, 3)
        det = np.einsum("tx,ptx->pt", e1, pvec)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
        tvec = origin - v0                                  # (T, 3)
        u = np.einsum("tx,ptx->pt", tvec, pvec) * inv
        qvec = np.cross(tvec[None, :, :], e1[None, :, :])
        vpar = np.einsum("px,ptx->pt", d, qvec) * inv
        tpar = np.einsum("tx,ptx->pt", e2, qvec) * inv
        hit = (np.abs(det) > 1e-14) & (u >= 0) & (vpar >= 0) & (u + vpar <= 1) & (tpar > NEAR_PLANE)
        tpar = np.where(hit, tpar, np.inf)
        # the camera-frame direction has z = 1, so the ray parameter is the depth
        best[start:start + block] = tpar.min(axis=1)
    best[~np.isfinite(best)] = 0.0
    return best.reshape(h, w)
