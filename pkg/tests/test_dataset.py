import json
import logging
import math

import numpy as np
import pytest

from mpnerf.dataset import (
    composite_alpha, downsample_box, focal_from_angle, load_multi_object, load_nerf_synthetic, load_png,
    save_image, write_toy_class, write_toy_object,
)
from mpnerf.errors import DatasetError, ValidationError


def write_scene(root, frames, angle=0.5, size=4):
    root.mkdir(parents=True, exist_ok=True)
    for f in frames:
        save_image(root / (f["file_path"] + ".png"), np.full((size, size, 4), 0.5))
    (root / "transforms_train.json").write_text(json.dumps({"camera_angle_x": angle, "frames": frames}))


class TestLoader:
    def test_focal_closed_form(self):
        assert focal_from_angle(800, 2 * math.atan(0.5)) == pytest.approx(800.0, rel=1e-12)

    def test_toy_scene_split_counts(self, tiny_scene):
        views = load_nerf_synthetic(tiny_scene, "train")
        assert len(views) == 30
        assert views.views[0].rgba.shape == (24, 24, 4)
        assert views.cameras[0].focal == pytest.approx(focal_from_angle(24, views.camera_angle_x))

    def test_empty_frames(self, tmp_path):
        write_scene(tmp_path, [])
        with pytest.raises(ValidationError):
            load_nerf_synthetic(tmp_path)

    def test_missing_field_names_file_and_field(self, tmp_path):
        write_scene(tmp_path, [{"file_path": "./a"}])
        with pytest.raises(DatasetError, match="transform_matrix"):
            load_nerf_synthetic(tmp_path)
        with pytest.raises(DatasetError, match="transforms_test.json"):
            load_nerf_synthetic(tmp_path, "test")

    def test_malformed_json(self, tmp_path):
        (tmp_path / "transforms_train.json").write_text("{not json")
        with pytest.raises(DatasetError, match="transforms_train.json"):
            load_nerf_synthetic(tmp_path)

    def test_missing_image(self, tmp_path):
        write_scene(tmp_path, [{"file_path": "./a", "transform_matrix": np.eye(4).tolist()}])
        (tmp_path / "a.png").unlink()
        with pytest.raises(DatasetError, match="a.png"):
            load_nerf_synthetic(tmp_path)

    def test_non_rigid_pose(self, tmp_path):
        pose = np.eye(4)
        pose[0, 0] = 1.5
        write_scene(tmp_path, [{"file_path": "./a", "transform_matrix": pose.tolist()}])
        with pytest.raises(ValidationError, match="frames\\[0\\]"):
            load_nerf_synthetic(tmp_path)

    def test_png_round_trip_is_exact_in_8_bit(self, tmp_path):
        levels = np.arange(256, dtype=np.float64).reshape(16, 16) / 255.0
        img = np.stack([levels, levels[::-1], levels.T], axis=-1)
        save_image(tmp_path / "x.png", img)
        np.testing.assert_array_equal(load_png(tmp_path / "x.png"), img)


class TestImageOps:
    def test_composite_alpha_cases(self):
        rgb = np.random.default_rng(0).random((3, 3, 3))
        np.testing.assert_array_equal(composite_alpha(np.dstack([rgb, np.ones((3, 3))])), rgb)
        np.testing.assert_array_equal(composite_alpha(np.dstack([rgb, np.zeros((3, 3))]), (0.1, 0.2, 0.3)),
                                      np.broadcast_to([0.1, 0.2, 0.3], (3, 3, 3)))
        half = np.array([[[1.0, 0.0, 0.0, 0.5]]])
        np.testing.assert_allclose(composite_alpha(half)[0, 0], [1.0, 0.5, 0.5])

    def test_box_filter_on_checkerboard(self):
        board = (np.indices((200, 200)).sum(axis=0) % 2).astype(np.float64)
        out = downsample_box(np.dstack([board] * 4), 2)
        assert out.shape == (100, 100, 4)
        np.testing.assert_array_equal(out, 0.5)
        blocks = np.kron(np.arange(4.0).reshape(2, 2), np.ones((2, 2)))
        np.testing.assert_array_equal(downsample_box(blocks, 2), [[0.0, 1.0], [2.0, 3.0]])

    def test_indivisible(self):
        with pytest.raises(ValidationError):
            downsample_box(np.zeros((5, 4, 3)), 2)


@pytest.fixture(scope="module")
def class_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("multi")
    write_toy_class(root, "chairs", n_train=3, n_test=1, seed=2, resolution=8)
    return root


class TestMultiObject:
    def test_manifest_disjoint(self, class_root):
        train = load_multi_object(class_root, "chairs", "train")
        test = load_multi_object(class_root, "chairs", "test")
        assert len(train.objects) == 3 and len(test.objects) == 1
        assert set(train.object_ids).isdisjoint(test.object_ids)
        assert all(len(v) == 50 for _, v in train.objects)

    def test_short_object_skipped_with_warning(self, tmp_path, caplog):
        write_toy_object(tmp_path / "chairs" / "a", "chairs", 1, resolution=8)
        write_toy_object(tmp_path / "chairs" / "b", "chairs", 2, resolution=8, n_views=10)
        (tmp_path / "chairs" / "manifest.json").write_text(json.dumps({"train": ["a", "b"], "test": []}))
        with caplog.at_level(logging.WARNING):
            ds = load_multi_object(tmp_path, "chairs", "train")
        assert ds.object_ids == ["a"]
        assert "b" in caplog.text

    def test_empty_class(self, tmp_path):
        write_toy_object(tmp_path / "cars" / "a", "cars", 1, resolution=8, n_views=5)
        (tmp_path / "cars" / "manifest.json").write_text(json.dumps({"train": ["a"], "test": []}))
        with pytest.raises(ValidationError):
            load_multi_object(tmp_path, "cars", "train")

    def test_overlapping_manifest(self, tmp_path):
        (tmp_path / "cars").mkdir()
        (tmp_path / "cars" / "manifest.json").write_text(json.dumps({"train": ["a"], "test": ["a"]}))
        with pytest.raises(ValidationError):
            load_multi_object(tmp_path, "cars", "train")

    def test_downsample_halves_dimensions(self, class_root):
        ds = load_multi_object(class_root, "chairs", "test", downsample=2)
        view = ds.objects[0][1].views[0]
        assert view.rgba.shape == (4, 4, 4)
        assert view.camera.width == 4
