import json
import math

import numpy as np
import pytest

import oracles
from se2diff.errors import DataError, GenerationError
from se2diff.lie_se2 import Se2Pose, compose, inverse
from se2diff.sim2d import (
    Demonstration,
    SceneParams,
    ShapeSpec,
    WorkspaceConfig,
    block_stack_task,
    demonstration_from_scene,
    fill_polygon,
    generate_dataset,
    generate_scene,
    get_task,
    l_shape_task,
    point_in_polygon,
    polygon_area,
    polygon_distance,
    polygon_is_simple,
    polygons_intersect,
    read_dataset,
    render,
    render_shapes,
    sample_scene_params,
    workspace_from_manifest,
    write_dataset,
)


CFG = WorkspaceConfig()
TASK = l_shape_task()


class TestWorkspaceConfig:
    def test_mapping_invertible_at_pixel_centers(self):
        cfg = WorkspaceConfig(width=96, height=96)
        px = np.stack(
            np.meshgrid(np.arange(96) + 0.5, np.arange(96) + 0.5), axis=-1
        ).reshape(-1, 2)
        back = cfg.to_px(cfg.to_norm(px))
        assert np.max(np.abs(back - px)) < 1e-9

    def test_center_maps_to_zero(self):
        cfg = WorkspaceConfig()
        np.testing.assert_allclose(cfg.to_norm(np.array([48.0, 48.0])), [0.0, 0.0])

    def test_validation(self):
        with pytest.raises(ValueError):
            WorkspaceConfig(width=16)
        with pytest.raises(ValueError):
            WorkspaceConfig(margin_frac=0.6)


class TestPolygonHelpers:
    def test_area_square(self):
        sq = np.array([[0, 0], [4, 0], [4, 4], [0, 4]])
        assert polygon_area(sq) == pytest.approx(16.0)

    def test_point_in_polygon(self):
        sq = np.array([[0, 0], [4, 0], [4, 4], [0, 4]])
        assert point_in_polygon((2, 2), sq)
        assert not point_in_polygon((5, 2), sq)

    def test_intersection_cases(self):
        a = np.array([[0, 0], [2, 0], [2, 2], [0, 2]])
        b = a + np.array([1.0, 1.0])
        c = a + np.array([5.0, 0.0])
        inner = np.array([[0.5, 0.5], [1.5, 0.5], [1.5, 1.5], [0.5, 1.5]])
        assert polygons_intersect(a, b)
        assert not polygons_intersect(a, c)
        assert polygons_intersect(a, inner)  # containment counts

    def test_distance(self):
        a = np.array([[0, 0], [2, 0], [2, 2], [0, 2]])
        c = a + np.array([5.0, 0.0])
        assert polygon_distance(a, c) == pytest.approx(3.0)
        assert polygon_distance(a, a + np.array([1.0, 0.0])) == 0.0

    def test_simple_check(self):
        assert polygon_is_simple(np.array([[0, 0], [2, 0], [2, 2], [0, 2]]))
        bowtie = np.array([[0, 0], [2, 2], [2, 0], [0, 2]])
        assert not polygon_is_simple(bowtie)


class TestShapeSpec:
    def test_anchor_must_be_inside(self):
        with pytest.raises(ValueError):
            ShapeSpec(name="bad", polygon=((0, 0), (2, 0), (2, 2), (0, 2)),
                      color=(1, 2, 3), anchor=(5.0, 5.0, 0.0))

    def test_polygon_must_be_simple(self):
        with pytest.raises(ValueError):
            ShapeSpec(name="bowtie", polygon=((0, 0), (2, 2), (2, 0), (0, 2)),
                      color=(1, 2, 3), anchor=(1.0, 1.0, 0.0))

    def test_unknown_task(self):
        with pytest.raises(DataError):
            get_task("no-such-task")


class TestRender:
    def test_empty_scene_uniform_background(self):
        img = render_shapes([], CFG)
        assert img.shape == (96, 96, 3)
        assert np.all(img == np.array(CFG.bg_color, dtype=np.uint8))

    def test_unit_square_area(self):
        # one normalized unit = half the workspace: a 48x48 px square
        img = np.zeros((96, 96, 3), dtype=np.float32)
        square = np.array([[24.0, 24.0], [72.0, 24.0], [72.0, 72.0], [24.0, 72.0]])
        fill_polygon(img, square, (255.0, 255.0, 255.0), supersample=4)
        area = img[:, :, 0].sum() / 255.0
        assert abs(area - 48.0**2) / 48.0**2 < 0.02

    def test_render_deterministic(self):
        rng = np.random.default_rng(0)
        scene = sample_scene_params(TASK, CFG, rng)
        a = render(scene, CFG)
        b = render(scene, CFG)
        np.testing.assert_array_equal(a, b)

    def test_frame_below_block(self):
        # block drawn over the frame: where they would overlap, block wins
        scene = SceneParams(
            task="l-shape",
            pick_obj=Se2Pose(0.0, 48.0, 48.0),
            place_obj=Se2Pose(0.0, 48.0, 48.0),
        )
        img = render(scene, CFG)
        # block interior pixel
        assert tuple(img[48, 48]) == TASK.pick_shape.color


class TestGenerateScene:
    def test_deterministic_given_seed(self):
        a = generate_scene(TASK, CFG, np.random.default_rng(42))
        b = generate_scene(TASK, CFG, np.random.default_rng(42))
        np.testing.assert_array_equal(a.image, b.image)
        assert a.pick_pose == b.pick_pose
        assert a.place_pose == b.place_pose

    def test_no_overlaps_by_independent_oracle(self):
        task = TASK
        pick_poly = task.pick_shape.polygon_array()
        place_poly = task.place_shape.polygon_array()
        for k in range(1000):
            scene = sample_scene_params(task, CFG, np.random.default_rng([99, k]))
            pv = scene.pick_obj.apply(pick_poly)
            qv = scene.place_obj.apply(place_poly)
            assert not oracles.polygons_overlap(pv, qv)

    def test_poses_inside_margins(self):
        mx = CFG.margin_frac * CFG.width
        for k in range(100):
            scene = sample_scene_params(TASK, CFG, np.random.default_rng([7, k]))
            for pose in (scene.pick_obj, scene.place_obj):
                assert mx <= pose.tx <= CFG.width - mx
                assert mx <= pose.ty <= CFG.height - mx

    def test_rotation_marginal_uniform(self):
        thetas = []
        for k in range(5000):
            scene = sample_scene_params(TASK, CFG, np.random.default_rng([3, k]))
            thetas.append(scene.pick_obj.theta)
            thetas.append(scene.place_obj.theta)
        t = np.sort((np.asarray(thetas) + math.pi) / (2 * math.pi))
        n = t.size
        ecdf_hi = np.arange(1, n + 1) / n
        ecdf_lo = np.arange(0, n) / n
        ks = max(np.max(np.abs(ecdf_hi - t)), np.max(np.abs(t - ecdf_lo)))
        assert ks < 0.05

    def test_generation_error_when_too_small(self):
        cfg = WorkspaceConfig(width=32, height=32)
        with pytest.raises(GenerationError):
            generate_scene(TASK, cfg, np.random.default_rng(0))

    def test_block_stack_task_generates(self):
        demo = generate_scene(block_stack_task(), CFG, np.random.default_rng(1))
        assert demo.image.shape == (96, 96, 3)

    def test_centroid_consistency(self):
        # pixels of the block's color should center on the polygon centroid
        block_centroid_local = oracles.polygon_centroid(TASK.pick_shape.polygon_array())
        for k in range(10):
            demo = generate_scene(TASK, CFG, np.random.default_rng([11, k]))
            mask = np.all(demo.image == np.array(TASK.pick_shape.color), axis=-1)
            rows, cols = np.nonzero(mask)
            measured = np.array([cols.mean() + 0.5, rows.mean() + 0.5])
            expected = demo.scene.pick_obj.apply(block_centroid_local)
            assert np.linalg.norm(measured - expected) < 2.0

    def test_transport_consistency(self):
        hole = np.array(TASK.place_shape.hole)
        block = TASK.pick_shape.polygon_array()
        for k in range(20):
            demo = generate_scene(TASK, CFG, np.random.default_rng([13, k]))
            transport = compose(demo.place_pose, inverse(demo.pick_pose))
            moved = transport.apply(demo.scene.pick_obj.apply(block))
            target = demo.scene.place_obj.apply(hole)
            assert np.max(np.abs(moved - target)) < 1e-9

    def test_rerender_reproduces_image(self):
        demo = generate_scene(TASK, CFG, np.random.default_rng(21))
        again = render(demo.scene, CFG)
        np.testing.assert_array_equal(demo.image, again)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        demos = generate_dataset(TASK, CFG, count=10, seed=5)
        write_dataset(demos, tmp_path / "ds", CFG, seed=5, task_name=TASK.name)
        loaded, manifest = read_dataset(tmp_path / "ds")
        assert manifest["count"] == 10
        assert workspace_from_manifest(manifest) == CFG
        for a, b in zip(demos, loaded):
            np.testing.assert_array_equal(a.image, b.image)
            assert a.pick_pose == b.pick_pose
            assert a.place_pose == b.place_pose
            assert a.scene == b.scene

    def test_byte_identical_datasets(self, tmp_path):
        for name in ("a", "b"):
            demos = generate_dataset(TASK, CFG, count=5, seed=7)
            write_dataset(demos, tmp_path / name, CFG, seed=7, task_name=TASK.name)
        for rel in ["manifest.json", "poses.jsonl"] + [
            f"scenes/{k:06d}.png" for k in range(5)
        ]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_missing_image_indexed_error(self, tmp_path):
        demos = generate_dataset(TASK, CFG, count=3, seed=1)
        write_dataset(demos, tmp_path / "ds", CFG, seed=1, task_name=TASK.name)
        (tmp_path / "ds" / "scenes" / "000001.png").unlink()
        with pytest.raises(DataError, match="scene 1"):
            read_dataset(tmp_path / "ds")

    def test_malformed_record_line_number(self, tmp_path):
        demos = generate_dataset(TASK, CFG, count=3, seed=2)
        write_dataset(demos, tmp_path / "ds", CFG, seed=2, task_name=TASK.name)
        path = tmp_path / "ds" / "poses.jsonl"
        lines = path.read_text().splitlines()
        lines[1] = '{"index": 1, "pick_pose": [1.0]}'
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="line 2"):
            read_dataset(tmp_path / "ds")

    def test_rerender_from_loaded_scene_bitwise(self, tmp_path):
        demos = generate_dataset(TASK, CFG, count=2, seed=9)
        write_dataset(demos, tmp_path / "ds", CFG, seed=9, task_name=TASK.name)
        loaded, manifest = read_dataset(tmp_path / "ds")
        cfg = workspace_from_manifest(manifest)
        for demo in loaded:
            np.testing.assert_array_equal(render(demo.scene, cfg), demo.image)
