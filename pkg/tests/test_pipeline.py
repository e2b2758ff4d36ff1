import numpy as np
import pytest

from polyloc import io as fio
from polyloc.cli import main as cli_main
from polyloc.estimate import AveragingConfig, RansacConfig
from polyloc.geom import CameraIntrinsics, Pose, pose_error
from polyloc.mesh import TriangleMesh, load_dmap, save_mesh
from polyloc.pipeline import (OUTDOOR_THRESHOLDS, EvalThresholds, Pipeline,
                              PipelineConfig, SyntheticMatchParams,
                              config_for_benchmark, evaluate,
                              export_synthetic_benchmark, localize_all,
                              render_db_views, run_query)
from polyloc.synth import SceneParams

from conftest import random_pose

TINY_SCENE = SceneParams(room_size=6.0, min_triangles=108, n_db_views=6, n_queries=3,
                         image_width=320, image_height=320, focal_px=320.0)
TINY_MATCHES = SyntheticMatchParams(n_inliers=80, n_outliers=20, noise_px=1.0)
FAST_RANSAC = RansacConfig(inlier_px=6.0, min_iterations=400, max_iterations=1600, seed=7)


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    export_synthetic_benchmark(TINY_SCENE, TINY_MATCHES, seed=21, out_dir=out)
    return out


class TestFileFormats:
    def test_db_views_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        views = {
            "img_a": (random_pose(rng), CameraIntrinsics(500, 500, 320, 240, 640, 480)),
            "img_b": (random_pose(rng), CameraIntrinsics(500, 400, 320, 240, 640, 480)),
            "img_c": (random_pose(rng),
                      CameraIntrinsics(500, 500, 320, 240, 640, 480, distortion=(-0.1, 0.02))),
        }
        path = tmp_path / "views.txt"
        fio.write_db_views(path, views)
        back = fio.read_db_views(path)
        assert list(back) == list(views)
        for name in views:
            pose, cam = views[name]
            pose2, cam2 = back[name]
            assert np.allclose(pose2.rotation, pose.rotation, atol=1e-12)
            assert np.allclose(pose2.center, pose.center, atol=1e-12)
            assert cam2 == cam

    def test_pose_file_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        poses = {f"q{i}": random_pose(rng) for i in range(20)}
        path = tmp_path / "poses.txt"
        fio.write_poses(path, poses)
        # the written floats survive text parsing exactly
        first = path.read_text()
        reformatted = []
        for line in first.splitlines():
            tok = line.split()
            reformatted.append(tok[0] + " " + " ".join(
                "{:.17g}".format(float(v)) for v in tok[1:]))
        assert "\n".join(reformatted) + "\n" == first
        # and the pose reconstructed from them matches to conversion accuracy
        back = fio.read_poses(path)
        for name, pose in poses.items():
            assert np.allclose(back[name].rotation, pose.rotation, atol=1e-12)
            assert np.allclose(back[name].center, pose.center, atol=1e-12)

    def test_matches_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        rows = rng.uniform(0, 800, size=(17, 4))
        path = tmp_path / "m.txt"
        fio.write_match_file(path, rows)
        assert np.array_equal(fio.read_match_file(path), rows)
        scored = np.concatenate([rows, rng.uniform(0, 1, (17, 1))], axis=1)
        fio.write_match_file(path, scored)
        assert np.array_equal(fio.read_match_file(path), scored)

    def test_pairs_roundtrip(self, tmp_path):
        pairs = [("q1", "db1"), ("q1", "db2"), ("q2", "db1")]
        path = tmp_path / "pairs.txt"
        fio.write_pairs(path, pairs)
        assert fio.read_pairs(path) == pairs

    def test_query_cameras_roundtrip(self, tmp_path):
        cams = {"q": CameraIntrinsics(640, 640, 320, 240, 640, 480, distortion=(-0.05,))}
        path = tmp_path / "queries.txt"
        fio.write_query_cameras(path, cams)
        assert fio.read_query_cameras(path)["q"] == cams["q"]

    def test_unknown_camera_model_rejected(self, tmp_path):
        path = tmp_path / "views.txt"
        path.write_text("img 1 0 0 0 0 0 0 FISHEYE 640 480 1 2 3 4\n")
        with pytest.raises(ValueError, match="FISHEYE"):
            fio.read_db_views(path)


class TestEvaluate:
    def write(self, path, poses):
        fio.write_poses(path, poses)
        return path

    def test_perfect_estimates(self, tmp_path):
        rng = np.random.default_rng(3)
        gt = {f"q{i}": random_pose(rng) for i in range(4)}
        g = self.write(tmp_path / "gt.txt", gt)
        e = self.write(tmp_path / "est.txt", gt)
        rows = evaluate(e, g, OUTDOOR_THRESHOLDS)
        assert [pct for _, pct in rows] == [100.0, 100.0, 100.0]

    def test_empty_estimates(self, tmp_path):
        rng = np.random.default_rng(4)
        gt = {f"q{i}": random_pose(rng) for i in range(4)}
        g = self.write(tmp_path / "gt.txt", gt)
        e = self.write(tmp_path / "est.txt", {})
        rows = evaluate(e, g, OUTDOOR_THRESHOLDS)
        assert [pct for _, pct in rows] == [0.0, 0.0, 0.0]

    def test_threshold_arithmetic(self, tmp_path):
        gt = {"a": Pose.identity(), "b": Pose.identity()}
        est = {"a": Pose.identity(),
               "b": Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))}  # off by 1 m
        g = self.write(tmp_path / "gt.txt", gt)
        e = self.write(tmp_path / "est.txt", est)
        rows = evaluate(e, g, OUTDOOR_THRESHOLDS)
        assert [pct for _, pct in rows] == [50.0, 50.0, 100.0]

    def test_monotone_along_ladder(self, tmp_path):
        rng = np.random.default_rng(5)
        gt = {f"q{i}": random_pose(rng) for i in range(12)}
        est = {}
        for i, (name, pose) in enumerate(gt.items()):
            est[name] = Pose(pose.rotation, pose.center + rng.normal(0, 0.3, 3))
        g = self.write(tmp_path / "gt.txt", gt)
        e = self.write(tmp_path / "est.txt", est)
        pcts = [pct for _, pct in evaluate(e, g, OUTDOOR_THRESHOLDS)]
        assert pcts == sorted(pcts)

    def test_unknown_estimate_rejected(self, tmp_path):
        g = self.write(tmp_path / "gt.txt", {"a": Pose.identity()})
        e = self.write(tmp_path / "est.txt", {"zz": Pose.identity()})
        with pytest.raises(ValueError, match="zz"):
            evaluate(e, g, OUTDOOR_THRESHOLDS)


class TestRenderDbViews:
    def test_depth_only_writes_no_images(self, bench_dir, tmp_path):
        cfg = config_for_benchmark(bench_dir, render_style="depth")
        written = render_db_views(cfg, tmp_path / "r")
        assert len([w for w in written if w.endswith(".dmap")]) == TINY_SCENE.n_db_views
        assert not [w for w in written if w.endswith(".ppm")]

    def test_colored_without_colors_errors(self, bench_dir, tmp_path):
        mesh_path = tmp_path / "plain.ply"
        bare = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                            np.array([[0, 1, 2]]))
        save_mesh(bare, mesh_path)
        cfg = config_for_benchmark(bench_dir, render_style="colored",
                                   mesh_path=str(mesh_path))
        with pytest.raises(ValueError, match="vertex_colors"):
            render_db_views(cfg, tmp_path / "r")

    def test_rerun_bit_identical(self, bench_dir, tmp_path):
        cfg = config_for_benchmark(bench_dir, render_style="colored")
        a, b = tmp_path / "a", tmp_path / "b"
        render_db_views(cfg, a)
        render_db_views(cfg, b)
        for f in sorted(a.iterdir()):
            assert f.read_bytes() == (b / f.name).read_bytes()


class TestRunQuery:
    def test_noise_free_end_to_end(self, tmp_path):
        out = tmp_path / "clean"
        scene = export_synthetic_benchmark(
            TINY_SCENE, SyntheticMatchParams(n_inliers=80, n_outliers=0, noise_px=0.0),
            seed=31, out_dir=out)
        cfg = config_for_benchmark(out, ransac=FAST_RANSAC)
        result = run_query(cfg, "query_0000")
        assert result is not None
        pose, diag = result
        err = pose_error(pose, scene.gt_queries[0].pose)
        assert err.position_m < 0.005
        assert err.rotation_deg < 0.05
        assert diag["pairs_used"] >= 1

    def test_missing_matches_file_skips_pair(self, bench_dir, tmp_path):
        pairs = fio.read_pairs(bench_dir / "pairs.txt")
        q0 = pairs[0][0]
        mine = [p for p in pairs if p[0] == q0]
        # add a pair whose matches file does not exist
        broken = mine + [(q0, "db_9999")]
        pairs_file = tmp_path / "pairs.txt"
        fio.write_pairs(pairs_file, broken)
        cfg = config_for_benchmark(bench_dir, ransac=FAST_RANSAC,
                                   pairs_file=str(pairs_file))
        result = run_query(cfg, q0)
        assert result is not None
        _, diag = result
        assert diag["pairs_skipped"] == 1
        assert diag["pairs_used"] == len(mine)

    def test_merge_uses_fewer_matches(self, tmp_path):
        params = SceneParams(room_size=6.0, min_triangles=108, n_db_views=12,
                             n_queries=1, image_width=320, image_height=320,
                             focal_px=320.0)
        out = tmp_path / "m"
        scene = export_synthetic_benchmark(
            params, SyntheticMatchParams(n_inliers=120, n_outliers=0, noise_px=1.0),
            seed=33, out_dir=out)
        gt = scene.gt_queries[0].pose
        res_i = run_query(config_for_benchmark(out, ransac=FAST_RANSAC), "query_0000")
        res_m = run_query(config_for_benchmark(out, ransac=FAST_RANSAC,
                                               strategy="merge"), "query_0000")
        assert res_i is not None and res_m is not None
        assert res_m[1]["n_matches_2d3d"] <= res_i[1]["n_matches_2d3d"]
        assert pose_error(res_i[0], gt).position_m < 0.05
        assert pose_error(res_m[0], gt).position_m < 0.05

    def test_triangulate_strategy_runs(self, tmp_path):
        params = SceneParams(room_size=6.0, min_triangles=108, n_db_views=12,
                             n_queries=1, image_width=320, image_height=320,
                             focal_px=320.0)
        out = tmp_path / "t"
        scene = export_synthetic_benchmark(
            params, SyntheticMatchParams(n_inliers=120, n_outliers=0, noise_px=0.5),
            seed=35, out_dir=out)
        res = run_query(config_for_benchmark(out, ransac=FAST_RANSAC,
                                             strategy="triangulate"), "query_0000")
        assert res is not None
        assert pose_error(res[0], scene.gt_queries[0].pose).position_m < 0.1

    def test_unknown_query_raises(self, bench_dir):
        cfg = config_for_benchmark(bench_dir, ransac=FAST_RANSAC)
        with pytest.raises(KeyError):
            run_query(cfg, "query_9999")


class TestLocalizeAll:
    def test_poses_file_deterministic(self, bench_dir, tmp_path):
        outputs = []
        for name in ("one", "two"):
            cfg = config_for_benchmark(
                bench_dir, ransac=FAST_RANSAC,
                output_poses=str(tmp_path / f"{name}.txt"))
            localize_all(cfg)
            outputs.append((tmp_path / f"{name}.txt").read_bytes())
        assert outputs[0] == outputs[1]

    def test_threads_match_serial(self, bench_dir, tmp_path):
        serial = config_for_benchmark(bench_dir, ransac=FAST_RANSAC,
                                      output_poses=str(tmp_path / "s.txt"))
        threaded = config_for_benchmark(bench_dir, ransac=FAST_RANSAC, threads=4,
                                        output_poses=str(tmp_path / "t.txt"))
        localize_all(serial)
        localize_all(threaded)
        assert (tmp_path / "s.txt").read_bytes() == (tmp_path / "t.txt").read_bytes()

    def test_depth_cache_reused_and_equivalent(self, bench_dir, tmp_path):
        cache = tmp_path / "cache"
        plain = config_for_benchmark(bench_dir, ransac=FAST_RANSAC,
                                     output_poses=str(tmp_path / "p.txt"))
        cached = config_for_benchmark(bench_dir, ransac=FAST_RANSAC,
                                      depth_cache_dir=str(cache),
                                      output_poses=str(tmp_path / "c.txt"))
        localize_all(plain)
        localize_all(cached)   # populates the cache
        first = (tmp_path / "c.txt").read_bytes()
        localize_all(cached)   # reads it back
        assert (tmp_path / "c.txt").read_bytes() == first
        assert (tmp_path / "p.txt").read_bytes() == first
        # one cached depth map per database view the queries actually touch
        used_views = {db for _, db in fio.read_pairs(bench_dir / "pairs.txt")}
        assert {f.stem for f in cache.glob("*.dmap")} == used_views

    def test_covisibility_single_component_unchanged(self, bench_dir, tmp_path):
        base = config_for_benchmark(bench_dir, ransac=FAST_RANSAC,
                                    output_poses=str(tmp_path / "a.txt"))
        covis = config_for_benchmark(bench_dir, ransac=FAST_RANSAC, covisibility=True,
                                     output_poses=str(tmp_path / "b.txt"))
        ra = localize_all(base)
        rb = localize_all(covis)
        assert set(ra) == set(rb)

    def test_position_averaging_keeps_rotation(self, bench_dir, tmp_path):
        base = config_for_benchmark(bench_dir, ransac=FAST_RANSAC,
                                    output_poses=str(tmp_path / "a.txt"))
        pa = config_for_benchmark(bench_dir, ransac=FAST_RANSAC,
                                  position_averaging=True,
                                  averaging=AveragingConfig(0.25, 0.05),
                                  output_poses=str(tmp_path / "b.txt"))
        ra = localize_all(base)
        rb = localize_all(pa)
        for name in ra:
            assert np.array_equal(ra[name].rotation, rb[name].rotation)

    def test_diagnostics_written(self, bench_dir, tmp_path):
        cfg = config_for_benchmark(bench_dir, ransac=FAST_RANSAC,
                                   output_poses=str(tmp_path / "p.txt"),
                                   output_diagnostics=str(tmp_path / "d.json"))
        localize_all(cfg)
        import json
        diags = json.loads((tmp_path / "d.json").read_text())
        assert len(diags) == TINY_SCENE.n_queries
        assert all("query" in d for d in diags)


class TestCli:
    def test_full_chain(self, tmp_path, capsys):
        out = tmp_path / "bench"
        assert cli_main(["synth", "--out", str(out), "--seed", "5",
                         "--n-db", "6", "--n-queries", "2",
                         "--image-size", "320", "--focal", "320",
                         "--min-triangles", "108",
                         "--n-inliers", "80", "--n-outliers", "10",
                         "--noise-px", "1.0"]) == 0
        render_out = tmp_path / "renders"
        assert cli_main(["render", "--mesh", str(out / "mesh.ply"),
                         "--views", str(out / "db_views.txt"),
                         "--out", str(render_out), "--style", "colored"]) == 0
        assert len(list(render_out.glob("*.ppm"))) == 6
        poses = tmp_path / "poses.txt"
        assert cli_main(["localize",
                         "--mesh", str(out / "mesh.ply"),
                         "--views", str(out / "db_views.txt"),
                         "--queries", str(out / "queries.txt"),
                         "--pairs", str(out / "pairs.txt"),
                         "--matches", str(out / "matches"),
                         "--depth-cache", str(render_out),
                         "--min-iterations", "400", "--max-iterations", "1600",
                         "--position-averaging", "--d-vol", "0.25", "--d-step", "0.05",
                         "--output", str(poses)]) == 0
        assert cli_main(["evaluate", "--estimates", str(poses),
                         "--gt", str(out / "gt_poses.txt")]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert any("within 0.25 m, 2 deg" in ln for ln in lines)
        pct = float(lines[-3].split(":")[1].strip().rstrip("%"))
        assert pct == 100.0

    def test_config_file(self, tmp_path, bench_dir, capsys):
        poses = tmp_path / "poses.txt"
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            f"""# synthetic benchmark run
            mesh = {bench_dir}/mesh.ply
            views = {bench_dir}/db_views.txt
            queries = {bench_dir}/queries.txt
            pairs = {bench_dir}/pairs.txt
            matches = {bench_dir}/matches
            min-iterations = 400
            max-iterations = 1600
            position-averaging = true
            d-vol = 0.25
            d-step = 0.05
            output = {poses}
            """)
        assert cli_main(["localize", "--config", str(cfg_file)]) == 0
        assert poses.exists()
        assert "localized" in capsys.readouterr().out

    def test_bad_config_key(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("nonsense-key = 1\n")
        with pytest.raises(SystemExit):
            cli_main(["localize", "--config", str(cfg_file)])
