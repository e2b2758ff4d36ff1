"""Command-line interface: localize, render, evaluate, synth."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import io as fio
from .estimate import AveragingConfig, RansacConfig
from .pipeline import (INDOOR_THRESHOLDS, INLIER_THRESHOLD_PRESETS, OUTDOOR_THRESHOLDS,
                       EvalThresholds, PipelineConfig, SyntheticMatchParams, evaluate,
                       export_synthetic_benchmark, localize_all, render_db_views)
from .synth import SceneParams


def _parse_thresholds(spec: str) -> EvalThresholds:
    """Parse '0.25,2;0.5,5;5,10' into threshold pairs."""
    pairs = []
    for chunk in spec.split(";"):
        pos, rot = chunk.split(",")
        pairs.append((float(pos), float(rot)))
    return EvalThresholds(tuple(pairs))


def _load_config_file(path: str) -> dict[str, str]:
    """Read 'key = value' lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _add_localize_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file supplying defaults for any flag below")
    p.add_argument("--mesh", help="scene mesh (PLY)")
    p.add_argument("--views", help="database views file")
    p.add_argument("--queries", help="query intrinsics file")
    p.add_argument("--pairs", help="retrieval pairs file")
    p.add_argument("--matches", help="directory of per-pair match files")
    p.add_argument("--strategy", choices=["individual", "merge", "triangulate"],
                   default="individual")
    p.add_argument("--covisibility", action="store_true",
                   help="estimate per covisibility component")
    p.add_argument("--position-averaging", action="store_true")
    p.add_argument("--d-vol", type=float, default=1.0, help="averaging half side length (m)")
    p.add_argument("--d-step", type=float, default=0.25, help="averaging grid step (m)")
    p.add_argument("--inlier-px", type=float, default=None,
                   help="RANSAC inlier threshold in pixels")
    p.add_argument("--inlier-preset", choices=sorted(INLIER_THRESHOLD_PRESETS),
                   default="keypoint", help="named threshold preset (default keypoint = 6 px)")
    p.add_argument("--min-iterations", type=int, default=10_000)
    p.add_argument("--max-iterations", type=int, default=100_000)
    p.add_argument("--confidence", type=float, default=0.9999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--depth-cache", default=None, help="directory for cached depth maps")
    p.add_argument("--output", default="poses.txt")
    p.add_argument("--diagnostics", default=None, help="write per-query diagnostics JSON here")


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    missing = [f for f in ("mesh", "views", "queries", "pairs", "matches")
               if getattr(args, f) is None]
    if missing:
        raise SystemExit(f"missing required options: {', '.join('--' + m for m in missing)}")
    inlier_px = args.inlier_px
    if inlier_px is None:
        inlier_px = INLIER_THRESHOLD_PRESETS[args.inlier_preset]
    return PipelineConfig(
        mesh_path=args.mesh,
        db_views_file=args.views,
        queries_file=args.queries,
        pairs_file=args.pairs,
        matches_dir=args.matches,
        strategy=args.strategy,
        covisibility=args.covisibility,
        position_averaging=args.position_averaging,
        averaging=AveragingConfig(d_vol=args.d_vol, d_step=args.d_step),
        ransac=RansacConfig(inlier_px=inlier_px, min_iterations=args.min_iterations,
                            max_iterations=args.max_iterations, confidence=args.confidence,
                            seed=args.seed),
        top_k=args.top_k,
        threads=args.threads,
        depth_cache_dir=args.depth_cache,
        output_poses=args.output,
        output_diagnostics=args.diagnostics,
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="polyloc",
        description="Visual localization against triangle-mesh scene models.")
    sub = parser.add_subparsers(dest="command", required=True)

    loc = sub.add_parser("localize", help="estimate a pose for every query in the pairs file")
    _add_localize_args(loc)

    ren = sub.add_parser("render", help="render database views to depth maps and images")
    ren.add_argument("--mesh", required=True)
    ren.add_argument("--views", required=True)
    ren.add_argument("--out", required=True)
    ren.add_argument("--style", choices=["depth", "colored", "tricolor", "ao"],
                     default="depth")

    ev = sub.add_parser("evaluate", help="score estimated poses against ground truth")
    ev.add_argument("--estimates", required=True)
    ev.add_argument("--gt", required=True)
    group = ev.add_mutually_exclusive_group()
    group.add_argument("--thresholds", help="'pos,rot;pos,rot;...' in meters,degrees")
    group.add_argument("--preset", choices=["outdoor", "indoor"], default=None)

    sy = sub.add_parser("synth", help="export a synthetic benchmark the other commands can run")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--n-db", type=int, default=10)
    sy.add_argument("--n-queries", type=int, default=5)
    sy.add_argument("--room-size", type=float, default=6.0)
    sy.add_argument("--min-triangles", type=int, default=200)
    sy.add_argument("--image-size", type=int, default=800)
    sy.add_argument("--focal", type=float, default=800.0)
    sy.add_argument("--n-inliers", type=int, default=200)
    sy.add_argument("--n-outliers", type=int, default=50)
    sy.add_argument("--noise-px", type=float, default=1.0)

    # a config file only feeds the localize subcommand; merge it before parsing
    if argv is None:
        argv = sys.argv[1:]
    if argv and argv[0] == "localize" and "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        loc.set_defaults(**_coerce_file_values(loc, _load_config_file(cfg_path)))
    args = parser.parse_args(argv)

    if args.command == "localize":
        cfg = _config_from_args(args)
        results = localize_all(cfg)
        n_total = len({q for q, _ in fio.read_pairs(cfg.pairs_file)})
        print(f"localized {len(results)}/{n_total} queries -> {cfg.output_poses}")
        return 0
    if args.command == "render":
        cfg = PipelineConfig(mesh_path=args.mesh, db_views_file=args.views,
                             queries_file="", pairs_file="", matches_dir="",
                             render_style=args.style)
        written = render_db_views(cfg, args.out)
        print(f"wrote {len(written)} files to {args.out}")
        return 0
    if args.command == "evaluate":
        if args.thresholds:
            thresholds = _parse_thresholds(args.thresholds)
        elif args.preset == "indoor":
            thresholds = INDOOR_THRESHOLDS
        else:
            thresholds = OUTDOOR_THRESHOLDS
        for (pos, rot), pct in evaluate(args.estimates, args.gt, thresholds):
            print(f"within {pos:g} m, {rot:g} deg: {pct:.1f}%")
        return 0
    if args.command == "synth":
        params = SceneParams(room_size=args.room_size, min_triangles=args.min_triangles,
                             n_db_views=args.n_db, n_queries=args.n_queries,
                             image_width=args.image_size, image_height=args.image_size,
                             focal_px=args.focal)
        match_params = SyntheticMatchParams(n_inliers=args.n_inliers,
                                            n_outliers=args.n_outliers,
                                            noise_px=args.noise_px)
        export_synthetic_benchmark(params, match_params, args.seed, args.out)
        print(f"exported {args.n_queries}-query benchmark to {args.out}")
        return 0
    return 1


def _coerce_file_values(parser: argparse.ArgumentParser, values: dict[str, str]) -> dict:
    """Convert config-file strings using each option's declared type."""
    coerced: dict = {}
    by_dest = {a.dest: a for a in parser._actions}
    for key, raw in values.items():
        if key not in by_dest:
            raise SystemExit(f"unknown config key {key!r}")
        action = by_dest[key]
        if isinstance(action, argparse._StoreTrueAction):
            coerced[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            coerced[key] = action.type(raw)
        else:
            coerced[key] = raw
    return coerced


if __name__ == "__main__":
    raise SystemExit(main())
