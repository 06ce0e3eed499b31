import math

import numpy as np
import pytest

from ov3dsim.errors import ConfigurationError, EmptyObjectError
from ov3dsim.geometry import CameraModel, OrientedBox3D, contains, project_box
from ov3dsim.scene import (
    InsertConfig,
    NovelObjectSample,
    ObjectAnnotation,
    PointCloudScene,
    count_points_in_box,
    crop_region_2d,
    extract_object,
    insert_object,
    load_scene,
    read_ply,
    sample_points_at,
    save_scene,
    write_ply,
)


def simple_camera():
    k = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    return CameraModel(k, np.eye(3), np.zeros(3))


def grid_scene():
    """11^3 grid spaced 0.1 m, spanning [-0.5, 0.5]^3 exactly."""
    axis = np.linspace(-0.5, 0.5, 11)
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])
    return PointCloudScene(points=pts)


class TestCounting:
    def test_empty_scene(self):
        scene = PointCloudScene(points=np.zeros((0, 3)))
        assert count_points_in_box(scene, OrientedBox3D([0, 0, 0], [1, 1, 1], 0)) == 0

    def test_all_inside(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-0.4, 0.4, size=(500, 3))
        scene = PointCloudScene(points=pts)
        assert count_points_in_box(scene, OrientedBox3D([0, 0, 0], [1, 1, 1], 0)) == 500

    def test_grid_inclusive_boundaries(self):
        scene = grid_scene()
        box = OrientedBox3D([0, 0, 0], [1, 1, 1], 0.0)
        assert count_points_in_box(scene, box) == 11**3


class TestExtraction:
    def test_extracts_exactly_contained_points(self):
        rng = np.random.default_rng(1)
        inside = rng.uniform(-0.45, 0.45, size=(10, 3))
        outside = rng.uniform(2.0, 3.0, size=(90, 3))
        scene = PointCloudScene(points=np.vstack([inside, outside]))
        sample = extract_object(scene, OrientedBox3D([0, 0, 0], [1, 1, 1], 0.0))
        assert sample.num_points == 10

    def test_empty_extraction_raises(self):
        scene = PointCloudScene(points=np.array([[5.0, 5.0, 5.0]]))
        with pytest.raises(EmptyObjectError):
            extract_object(scene, OrientedBox3D([0, 0, 0], [1, 1, 1], 0.0))

    def test_rotated_extraction_matches_hand_transform(self):
        yaw = math.pi / 4
        center = np.array([1.0, 2.0, 0.5])
        pts = np.array([[1.0, 2.0, 0.5], [1.2, 2.1, 0.6], [0.9, 1.8, 0.4]])
        scene = PointCloudScene(points=pts)
        box = OrientedBox3D(center, [1, 1, 1], yaw)
        sample = extract_object(scene, box)
        c, s = math.cos(-yaw), math.sin(-yaw)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        expected = (rot @ (pts - center).T).T
        got = sample.points[np.lexsort(sample.points.T)]
        expected = expected[np.lexsort(expected.T)]
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_local_points_inside_zero_centered_box(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-3, 3, size=(500, 3))
        scene = PointCloudScene(points=pts)
        box = OrientedBox3D([0.3, -0.2, 0.1], [1.5, 0.8, 1.1], 0.7)
        sample = extract_object(scene, box)
        zero_box = OrientedBox3D([0, 0, 0], sample.box_size, 0.0)
        assert all(contains(zero_box, p) for p in sample.points)

    def test_reinsertion_roundtrip(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1, 1, size=(400, 3))
        scene = PointCloudScene(points=pts)
        box = OrientedBox3D([0.1, 0.0, 0.2], [1.2, 0.9, 0.8], 1.1)
        sample = extract_object(scene, box)
        back = sample_points_at(sample, box.center, box.yaw)
        original = pts[[contains(box, p) for p in pts]]
        back = back[np.lexsort(back.T)]
        original = original[np.lexsort(original.T)]
        np.testing.assert_allclose(back, original, atol=1e-9)


class TestCrop:
    def test_delegates_to_projection(self):
        scene = PointCloudScene(
            points=np.zeros((0, 3)), camera=simple_camera(),
            image_ref="img", image_size=(10.0, 10.0),
        )
        box = OrientedBox3D([0, 0, 2], [1, 1, 1], 0.0)
        got = crop_region_2d(scene, box)
        expected = project_box(box, scene.camera, (10.0, 10.0))
        assert got == expected

    def test_missing_camera(self):
        scene = PointCloudScene(points=np.zeros((0, 3)))
        with pytest.raises(ConfigurationError):
            crop_region_2d(scene, OrientedBox3D([0, 0, 2], [1, 1, 1], 0.0))

    def test_behind_camera_propagates(self):
        from ov3dsim.errors import BehindCameraError

        scene = PointCloudScene(
            points=np.zeros((0, 3)), camera=simple_camera(), image_size=(10.0, 10.0)
        )
        with pytest.raises(BehindCameraError):
            crop_region_2d(scene, OrientedBox3D([0, 0, -2], [1, 1, 1], 0.0))


class TestInsertion:
    def make_sample(self, n=50, size=(0.6, 0.6, 0.6), seed=4):
        rng = np.random.default_rng(seed)
        half = np.asarray(size) / 2
        pts = rng.uniform(-half, half, size=(n, 3))
        return NovelObjectSample(points=pts, box_size=size, category=3, semantic_prob=0.8)

    def test_empty_scene_accepts_first_try(self):
        scene = PointCloudScene(points=np.zeros((0, 3)))
        sample = self.make_sample()
        result = insert_object(scene, sample, InsertConfig(occupancy_limit=1000), np.random.default_rng(0))
        assert result.accepted and result.attempts == 1
        assert result.scene.num_points == sample.num_points
        assert result.scene.annotations[-1].source == "discovered"
        assert result.scene.annotations[-1].category == 3

    def test_dense_candidate_rejected_then_retry(self):
        # A compact blob of 1500 points fills every candidate region, so the
        # first candidate must fail the occupancy check with limit 1000.
        rng = np.random.default_rng(5)
        pts = rng.uniform(-0.05, 0.05, size=(1500, 3))
        scene = PointCloudScene(points=pts)
        sample = self.make_sample(size=(0.5, 0.5, 0.5))
        cfg = InsertConfig(occupancy_limit=1000, max_retries=200)
        result = insert_object(scene, sample, cfg, np.random.default_rng(6))
        # Scene bounds are only 0.1 m wide: every box covers the blob.
        assert not result.accepted
        assert result.attempts == 200
        assert result.scene is scene

    def test_skip_reports_unchanged_scene(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-0.2, 0.2, size=(5000, 3))
        scene = PointCloudScene(points=pts)
        sample = self.make_sample(size=(1.0, 1.0, 1.0))
        cfg = InsertConfig(occupancy_limit=10, max_retries=5)
        result = insert_object(scene, sample, cfg, np.random.default_rng(8))
        assert not result.accepted
        assert result.scene.num_points == 5000

    def test_accepted_box_contains_pre_plus_sample_points(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(0.0, 6.0, size=(3000, 3))
        pts[:, 2] *= 0.3
        scene = PointCloudScene(points=pts)
        sample = self.make_sample(n=80)
        cfg = InsertConfig(occupancy_limit=1000, max_retries=50)
        result = insert_object(scene, sample, cfg, np.random.default_rng(10))
        assert result.accepted
        assert result.pre_count <= cfg.occupancy_limit
        post = count_points_in_box(result.scene, result.box)
        assert post == result.pre_count + sample.num_points

    def test_floor_alignment(self):
        rng = np.random.default_rng(11)
        pts = rng.uniform(0, 4, size=(500, 3))
        pts[:, 2] = rng.uniform(0.25, 1.5, size=500)
        scene = PointCloudScene(points=pts)
        sample = self.make_sample()
        result = insert_object(scene, sample, InsertConfig(), np.random.default_rng(12))
        assert result.accepted
        bottom = result.box.center[2] - result.box.size[2] / 2
        assert bottom == pytest.approx(scene.floor_level())


class TestPlyAndSceneIO:
    def test_ply_binary_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(13)
        pts = rng.standard_normal((257, 3))
        colors = rng.integers(0, 256, size=(257, 3)).astype(np.uint8)
        path = str(tmp_path / "cloud.ply")
        write_ply(path, pts, colors)
        back, cback = read_ply(path)
        assert np.array_equal(back, pts)
        assert np.array_equal(cback, colors)

    def test_ply_ascii_roundtrip(self, tmp_path):
        rng = np.random.default_rng(14)
        pts = rng.standard_normal((40, 3))
        path = str(tmp_path / "cloud_ascii.ply")
        write_ply(path, pts, binary=False)
        back, cback = read_ply(path)
        assert cback is None
        assert np.array_equal(back, pts)  # repr round-trips doubles exactly

    def test_ply_float32(self, tmp_path):
        pts = np.array([[0.25, -1.5, 3.0], [1.0, 2.0, -4.5]])
        path = str(tmp_path / "cloud32.ply")
        write_ply(path, pts, dtype="float")
        back, _ = read_ply(path)
        np.testing.assert_allclose(back, pts, atol=1e-6)

    def test_scene_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(15)
        pts = rng.standard_normal((100, 3)) * 3
        cam = CameraModel(
            np.array([[500.0, 0, 320], [0, 500.0, 240], [0, 0, 1]]),
            np.eye(3),
            np.array([0.1, -0.2, 4.0]),
        )
        scene = PointCloudScene(
            points=pts,
            annotations=[
                ObjectAnnotation(OrientedBox3D([1, 2, 0.5], [1, 1, 1], 0.3), 2),
                ObjectAnnotation(
                    OrientedBox3D([3, 1, 0.4], [0.8, 0.6, 0.8], -1.2), 7,
                    source="discovered", confidence=0.55,
                ),
            ],
            image_ref="synthetic://t",
            camera=cam,
        )
        path = str(tmp_path / "scene.json")
        save_scene(scene, path)
        back = load_scene(path)
        assert np.array_equal(back.points, scene.points)
        assert back.image_ref == scene.image_ref
        assert len(back.annotations) == 2
        for a, b in zip(scene.annotations, back.annotations):
            assert np.array_equal(a.box.center, b.box.center)
            assert np.array_equal(a.box.size, b.box.size)
            assert a.box.yaw == b.box.yaw
            assert (a.category, a.source, a.confidence) == (b.category, b.source, b.confidence)
        assert np.array_equal(back.camera.intrinsics, cam.intrinsics)
        assert np.array_equal(back.camera.rotation, cam.rotation)
        assert np.array_equal(back.camera.translation, cam.translation)


class TestAnnotationValidation:
    def test_source_and_confidence(self):
        box = OrientedBox3D([0, 0, 0], [1, 1, 1], 0)
        with pytest.raises(ValueError):
            ObjectAnnotation(box, 0, source="mystery")
        with pytest.raises(ValueError):
            ObjectAnnotation(box, 0, confidence=1.2)

    def test_sample_needs_points(self):
        with pytest.raises(ValueError):
            NovelObjectSample(points=np.zeros((0, 3)), box_size=[1, 1, 1])
