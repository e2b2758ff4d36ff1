"""End-to-end driver: ingest scene files, lift matches, estimate poses, evaluate.

Depth maps are rendered on demand and shared across queries; an optional
on-disk cache directory persists them between runs. Query match positions are
undistorted before lifting, matching the convention that database images (or
renderings) are distortion-free while query features may come from distorted
images.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as fio
from .estimate import (AveragingConfig, RansacConfig, estimate_with_covisibility,
                       position_average)
from .geom import Pose, pose_error, undistort_points
from .lift import (DatabaseView, Match2D2D, group_matches, lift_individual,
                   lift_triangulate, merge_matches)
from .mesh import (DepthMap, RenderStyle, load_dmap, load_mesh, render_depth,
                   render_image, save_dmap, save_ppm)
from .synth import SceneParams, SyntheticScene, db_image_name, generate_matches, generate_scene
from .mesh import save_mesh

STRATEGIES = ("individual", "merge", "triangulate")

# Default RANSAC inlier thresholds (pixels) by match source character:
# repeatable sparse keypoints, refined hybrid matches, coarse detector-free matches.
INLIER_THRESHOLD_PRESETS = {"keypoint": 6.0, "refined": 12.0, "dense": 20.0}


@dataclass(frozen=True)
class EvalThresholds:
    """Ordered (position m, rotation deg) acceptance thresholds."""

    pairs: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.pairs) == 0:
            raise ValueError("need at least one threshold pair")


OUTDOOR_THRESHOLDS = EvalThresholds(((0.25, 2.0), (0.5, 5.0), (5.0, 10.0)))
INDOOR_THRESHOLDS = EvalThresholds(((0.05, 5.0), (0.07, 7.0), (0.10, 10.0)))


@dataclass(frozen=True)
class PipelineConfig:
    mesh_path: str
    db_views_file: str
    queries_file: str
    pairs_file: str
    matches_dir: str
    strategy: str = "individual"
    covisibility: bool = False
    position_averaging: bool = False
    averaging: AveragingConfig = field(default_factory=AveragingConfig)
    ransac: RansacConfig = field(default_factory=lambda: RansacConfig(inlier_px=6.0))
    render_style: str = "depth"
    top_k: int = 50
    depth_cache_dir: str | None = None
    output_poses: str = "poses.txt"
    output_diagnostics: str | None = None
    threads: int = 1
    pa_over_inliers_only: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        RenderStyle.parse(self.render_style)
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")


class Pipeline:
    """Holds the parsed scene files and a shared depth-map cache."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.mesh = load_mesh(cfg.mesh_path)
        self.db_views = fio.read_db_views(cfg.db_views_file)
        self.query_cameras = fio.read_query_cameras(cfg.queries_file)
        self.pairs = fio.read_pairs(cfg.pairs_file)
        self.pairs_by_query: dict[str, list[str]] = {}
        for q, db in self.pairs:
            self.pairs_by_query.setdefault(q, []).append(db)
        self._depths: dict[str, DepthMap] = {}
        self._depth_lock = threading.Lock()

    def query_names(self) -> list[str]:
        return sorted(self.pairs_by_query)

    def _depth_for(self, db_name: str) -> DepthMap:
        with self._depth_lock:
            if db_name in self._depths:
                return self._depths[db_name]
        pose, cam = self.db_views[db_name]
        cache_file = None
        if self.cfg.depth_cache_dir is not None:
            cache_file = Path(self.cfg.depth_cache_dir) / f"{db_name}.dmap"
            if cache_file.exists():
                dm = load_dmap(cache_file)
            else:
                dm = render_depth(self.mesh, pose, cam)
                cache_file.parent.mkdir(parents=True, exist_ok=True)
                save_dmap(dm, cache_file)
                dm = load_dmap(cache_file)  # identical bits whether cached or fresh
        else:
            dm = render_depth(self.mesh, pose, cam)
        with self._depth_lock:
            self._depths[db_name] = dm
        return dm

    def run_query(self, query_id: str):
        """Localize one query; returns (Pose, diagnostics dict) or None."""
        cfg = self.cfg
        if query_id not in self.pairs_by_query:
            raise KeyError(f"query {query_id!r} not present in pairs file")
        if query_id not in self.query_cameras:
            raise ValueError(f"query {query_id!r} has no entry in the queries file")
        qcam = self.query_cameras[query_id]
        diag: dict = {"query": query_id, "pairs_skipped": 0}

        t0 = time.perf_counter()
        needs_depth = cfg.strategy in ("individual", "merge")
        matches: list[Match2D2D] = []
        views: dict[str, DatabaseView] = {}
        used_pairs = 0
        for db_name in self.pairs_by_query[query_id][: cfg.top_k]:
            if db_name not in self.db_views:
                diag["pairs_skipped"] += 1
                continue
            mpath = Path(cfg.matches_dir) / fio.match_file_name(query_id, db_name)
            if not mpath.exists():
                diag["pairs_skipped"] += 1
                continue
            rows = fio.read_match_file(mpath)
            if db_name not in views:
                pose, cam = self.db_views[db_name]
                depth = self._depth_for(db_name) if needs_depth else None
                views[db_name] = DatabaseView(pose, cam, depth)
            if len(rows):
                qpts = undistort_points(qcam, rows[:, 0:2])
                for r, qpt in zip(rows, qpts):
                    score = float(r[4]) if rows.shape[1] == 5 else None
                    matches.append(Match2D2D(qpt, db_name, r[2:4], score))
            used_pairs += 1
        diag["pairs_used"] = used_pairs
        diag["n_matches_2d2d"] = len(matches)
        diag["t_ingest_s"] = time.perf_counter() - t0
        if used_pairs == 0:
            return None

        t0 = time.perf_counter()
        dropped = 0
        if cfg.strategy == "individual":
            lifted, dropped = lift_individual(matches, views)
        elif cfg.strategy == "merge":
            lifted = []
            for group in group_matches(matches):
                cands, drp = lift_individual(group, views)
                dropped += drp
                if cands:
                    lifted.extend(merge_matches(cands, views, cfg.ransac.inlier_px))
        else:
            lifted = []
            for group in group_matches(matches):
                m3d = lift_triangulate(group, views, cfg.ransac.inlier_px)
                if m3d is not None:
                    lifted.append(m3d)
                else:
                    dropped += len(group)
        diag["n_matches_2d3d"] = len(lifted)
        diag["n_dropped"] = dropped
        diag["t_lift_s"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        result = estimate_with_covisibility(lifted, qcam, cfg.ransac, cfg.covisibility)
        diag["t_estimate_s"] = time.perf_counter() - t0
        if result is None:
            return None
        diag["n_inliers"] = int(len(result.inliers))
        diag["num_iterations"] = int(result.num_iterations)
        diag["component_id"] = int(result.component_id)
        diag["msac_score"] = float(result.msac_score)

        pose = result.pose
        if cfg.position_averaging:
            t0 = time.perf_counter()
            subject = ([lifted[i] for i in result.inliers]
                       if cfg.pa_over_inliers_only else lifted)
            pose = position_average(pose, subject, qcam, cfg.ransac, cfg.averaging)
            diag["t_averaging_s"] = time.perf_counter() - t0
        return pose, diag


def run_query(cfg: PipelineConfig, query_id: str):
    """One-shot convenience wrapper around Pipeline.run_query."""
    return Pipeline(cfg).run_query(query_id)


def localize_all(cfg: PipelineConfig) -> dict[str, Pose]:
    """Localize every query in the pairs file and write the poses file.

    Failed queries are omitted from the output (they count as failures at
    evaluation time). Output ordering is by query name, independent of the
    worker schedule.
    """
    pipe = Pipeline(cfg)
    names = pipe.query_names()
    results: dict[str, Pose] = {}
    diagnostics: list[dict] = []

    def work(name: str):
        return name, pipe.run_query(name)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            outs = list(pool.map(work, names))
    else:
        outs = [work(n) for n in names]
    for name, out in outs:
        if out is None:
            diagnostics.append({"query": name, "localized": False})
            continue
        pose, diag = out
        diag["localized"] = True
        results[name] = pose
        diagnostics.append(diag)

    out_path = Path(cfg.output_poses)
    if out_path.parent != Path(""):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    fio.write_poses(out_path, results)
    if cfg.output_diagnostics:
        diagnostics.sort(key=lambda d: d["query"])
        Path(cfg.output_diagnostics).write_text(json.dumps(diagnostics, indent=2, sort_keys=True))
    return results


def evaluate(estimates_path, gt_path, thresholds: EvalThresholds) -> list[tuple[tuple[float, float], float]]:
    """Percentage of groundn-truth queries localized within each threshold pair.

    Estimates for images absent from the ground truth are an error; ground
    truth images without an estimate count as failures at every threshold.
    """
    estimates = fio.read_poses(estimates_path)
    gt = fio.read_poses(gt_path)
    unknown = sorted(set(estimates) - set(gt))
    if unknown:
        raise ValueError(f"estimates contain images missing from ground truth: {unknown[:5]}")
    out = []
    for pos_thr, rot_thr in thresholds.pairs:
        good = 0
        for name, gt_pose in gt.items():
            if name not in estimates:
                continue
            err = pose_error(estimates[name], gt_pose)
            if err.position_m <= pos_thr and err.rotation_deg <= rot_thr:
                good += 1
        out.append(((pos_thr, rot_thr), 100.0 * good / len(gt) if gt else 0.0))
    return out


def render_db_views(cfg: PipelineConfig, out_dir) -> list[str]:
    """Render every database view to `<name>.dmap` (and `<name>.ppm` unless depth-only).

    Returns the list of written file names. Byte-identical across reruns with
    identical inputs.
    """
    style = RenderStyle.parse(cfg.render_style)
    mesh = load_mesh(cfg.mesh_path)
    if style == RenderStyle.COLORED and mesh.vertex_colors is None:
        raise ValueError("render style 'colored' needs vertex_colors in the mesh")
    if style == RenderStyle.AMBIENT_OCCLUSION and mesh.vertex_ao is None:
        raise ValueError("render style 'ao' needs vertex_ao in the mesh")
    views = fio.read_db_views(cfg.db_views_file)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (pose, cam) in views.items():
        dm = render_depth(mesh, pose, cam)
        save_dmap(dm, out / f"{name}.dmap")
        written.append(f"{name}.dmap")
        if style != RenderStyle.DEPTH_ONLY:
            img = render_image(mesh, pose, cam, style)
            save_ppm(img, out / f"{name}.ppm")
            written.append(f"{name}.ppm")
    return written


# ---------------------------------------------------------------------------
# Synthetic benchmark export

@dataclass(frozen=True)
class SyntheticMatchParams:
    n_inliers: int = 200
    n_outliers: int = 50
    noise_px: float = 1.0


def export_synthetic_benchmark(params: SceneParams, match_params: SyntheticMatchParams,
                               seed: int, out_dir) -> SyntheticScene:
    """Generate a scene and write the full on-disk layout the CLI consumes.

    Produces mesh.ply, db_views.txt, queries.txt, pairs.txt, gt_poses.txt and
    matches/ under `out_dir`; every query is paired with every database view.
    """
    out = Path(out_dir)
    (out / "matches").mkdir(parents=True, exist_ok=True)
    scene = generate_scene(params, seed)
    save_mesh(scene.mesh, out / "mesh.ply")

    db = {db_image_name(i): (v.pose, v.camera) for i, v in enumerate(scene.db_views)}
    fio.write_db_views(out / "db_views.txt", db)

    qnames = [f"query_{i:04d}" for i in range(len(scene.gt_queries))]
    fio.write_query_cameras(out / "queries.txt",
                            {n: v.camera for n, v in zip(qnames, scene.gt_queries)})
    fio.write_poses(out / "gt_poses.txt",
                    {n: v.pose for n, v in zip(qnames, scene.gt_queries)})

    pairs = []
    for qi, qname in enumerate(qnames):
        rows_by_db: dict[str, list] = {}
        matches, _ = generate_matches(scene, qi, match_params.n_inliers,
                                      match_params.n_outliers, match_params.noise_px,
                                      seed=seed + 1000 + qi)
        for m in matches:
            rows_by_db.setdefault(m.db_image, []).append(
                [m.query_pt[0], m.query_pt[1], m.db_pt[0], m.db_pt[1]])
        for db_name in sorted(rows_by_db):
            pairs.append((qname, db_name))
            fio.write_match_file(out / "matches" / fio.match_file_name(qname, db_name),
                                 np.asarray(rows_by_db[db_name]))
    fio.write_pairs(out / "pairs.txt", pairs)
    return scene


def config_for_benchmark(out_dir, **overrides) -> PipelineConfig:
    """PipelineConfig pointing at an exported benchmark directory."""
    out = Path(out_dir)
    base = PipelineConfig(
        mesh_path=str(out / "mesh.ply"),
        db_views_file=str(out / "db_views.txt"),
        queries_file=str(out / "queries.txt"),
        pairs_file=str(out / "pairs.txt"),
        matches_dir=str(out / "matches"),
        output_poses=str(out / "poses.txt"),
    )
    return replace(base, **overrides) if overrides else base
