import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from se2diff.lie_se2 import Se2Pose, compose, inverse
from se2diff.roi import OroiSpec, crop, crop_pixel_of, from_roi, to_roi
from se2diff.sim2d import SceneParams, WorkspaceConfig, l_shape_task, render

CFG = WorkspaceConfig()
TASK = l_shape_task()


def make_scene_image(rng):
    scene = SceneParams(
        task="l-shape",
        pick_obj=Se2Pose(rng.uniform(-math.pi, math.pi), rng.uniform(30, 66), rng.uniform(30, 66)),
        place_obj=Se2Pose(0.0, 20.0, 75.0),
    )
    return render(scene, CFG), scene


class TestSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            OroiSpec(center=Se2Pose.identity(), size=47)
        with pytest.raises(ValueError):
            OroiSpec(center=Se2Pose.identity(), size=48, scale=0.0)


class TestCrop:
    def test_identity_center_is_subimage(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(96, 96, 3), dtype=np.uint8)
        spec = OroiSpec(center=Se2Pose(0.0, 48.0, 48.0), size=48, scale=1.0)
        out = crop(img, spec)
        np.testing.assert_array_equal(out, img[24:72, 24:72].astype(np.float32))

    def test_fully_outside_uniform_fill(self):
        img = np.random.default_rng(1).integers(0, 256, size=(96, 96, 3), dtype=np.uint8)
        spec = OroiSpec(center=Se2Pose(0.3, 500.0, 500.0), size=48)
        out = crop(img, spec, fill_color=CFG.bg_color)
        assert np.all(out == np.asarray(CFG.bg_color, dtype=np.float32))

    def test_rotation_equivariance_of_scene(self):
        # rotating the scene and the crop center together leaves the crop
        # unchanged up to bilinear resampling error
        center = np.array([48.0, 48.0])
        obj = Se2Pose(0.4, 58.0, 44.0)
        rot = Se2Pose(math.pi / 2, 0.0, 0.0)
        # rotate about the image center: p -> c + R (p - c)
        about_center = compose(
            Se2Pose(0.0, center[0], center[1]),
            compose(rot, Se2Pose(0.0, -center[0], -center[1])),
        )
        obj_rot = compose(about_center, obj)
        img_a = render(SceneParams("l-shape", obj, Se2Pose(0.0, 20.0, 75.0)), CFG)
        img_b = render(
            SceneParams("l-shape", obj_rot, compose(about_center, Se2Pose(0.0, 20.0, 75.0))),
            CFG,
        )
        crop_a = crop(img_a, OroiSpec(center=obj, size=48), fill_color=CFG.bg_color)
        crop_b = crop(img_b, OroiSpec(center=obj_rot, size=48), fill_color=CFG.bg_color)
        assert np.mean(np.abs(crop_a - crop_b)) < 2.0

    def test_bad_image_shape(self):
        with pytest.raises(ValueError):
            crop(np.zeros((96, 96)), OroiSpec(center=Se2Pose.identity()))


class TestPoseMaps:
    def test_center_maps_to_identity(self):
        z = Se2Pose(0.7, 30.0, 40.0)
        res = to_roi(z, OroiSpec(center=z, size=48))
        assert abs(res.theta) < 1e-12
        assert abs(res.tx) < 1e-12
        assert abs(res.ty) < 1e-12

    def test_round_trip_random(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            z = Se2Pose(rng.uniform(-math.pi, math.pi), *rng.uniform(0, 96, 2))
            p = Se2Pose(rng.uniform(-math.pi, math.pi), *rng.uniform(0, 96, 2))
            spec = OroiSpec(center=z, size=48, scale=float(rng.uniform(0.5, 2.0)))
            back = from_roi(to_roi(p, spec), spec)
            assert abs(back.tx - p.tx) < 1e-9
            assert abs(back.ty - p.ty) < 1e-9
            assert abs(back.theta - p.theta) < 1e-9

    def test_displacement_along_heading(self):
        rng = np.random.default_rng(3)
        z = Se2Pose(rng.uniform(-math.pi, math.pi), 50.0, 40.0)
        p = compose(z, Se2Pose(0.0, 5.0, 0.0))
        res = to_roi(p, OroiSpec(center=z, size=48, scale=1.0))
        assert res.tx == pytest.approx(5.0, abs=1e-9)
        assert res.ty == pytest.approx(0.0, abs=1e-9)
        assert res.theta == pytest.approx(0.0, abs=1e-12)

    def test_equivariance(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            z = Se2Pose(rng.uniform(-math.pi, math.pi), *rng.uniform(10, 80, 2))
            g = Se2Pose(rng.uniform(-math.pi, math.pi), *rng.uniform(-5, 5, 2))
            p = Se2Pose(rng.uniform(-math.pi, math.pi), *rng.uniform(10, 80, 2))
            lhs = to_roi(p, OroiSpec(center=compose(z, g), size=48))
            rhs = compose(inverse(g), to_roi(p, OroiSpec(center=z, size=48)))
            assert abs(lhs.tx - rhs.tx) < 1e-9
            assert abs(lhs.ty - rhs.ty) < 1e-9
            assert abs(lhs.theta - rhs.theta) < 1e-9

    @given(
        st.floats(-math.pi + 1e-6, math.pi, allow_nan=False),
        st.floats(5.0, 90.0, allow_nan=False),
        st.floats(5.0, 90.0, allow_nan=False),
    )
    @settings(max_examples=100, deadline=None)
    def test_round_trip_property(self, theta, tx, ty):
        z = Se2Pose(0.3, 48.0, 48.0)
        spec = OroiSpec(center=z, size=48, scale=1.0)
        p = Se2Pose(theta, tx, ty)
        back = from_roi(to_roi(p, spec), spec)
        assert abs(back.tx - p.tx) < 1e-9
        assert abs(back.ty - p.ty) < 1e-9


class TestPixelPoseConsistency:
    def test_dot_lands_at_predicted_crop_pixel(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            # bright 1-px dot at a known position
            img = np.zeros((96, 96, 3), dtype=np.uint8)
            px = rng.uniform(30, 66, 2)
            r, c = int(px[1]), int(px[0])
            img[r, c] = (255, 255, 255)
            dot_center = np.array([c + 0.5, r + 0.5])
            z = Se2Pose(rng.uniform(-math.pi, math.pi), *rng.uniform(40, 56, 2))
            spec = OroiSpec(center=z, size=48, scale=1.0)
            out = crop(img, spec)
            mass = out.sum(axis=-1)
            total = mass.sum()
            assert total > 0
            rows, cols = np.nonzero(mass)
            weights = mass[rows, cols]
            measured = np.array(
                [np.sum((cols + 0.5) * weights), np.sum((rows + 0.5) * weights)]
            ) / weights.sum()
            predicted = crop_pixel_of(
                Se2Pose(0.0, dot_center[0], dot_center[1]), spec
            )
            assert np.linalg.norm(measured - predicted) < 1.0
