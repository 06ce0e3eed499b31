import math

import numpy as np
import pytest

from ov3dsim.discovery import (
    DataPool,
    DiscoveryConfig,
    LabelPool,
    Proposal,
    discover,
    load_data_pool,
    load_label_pool_snapshot,
    load_proposals,
    sample_enrichment,
    save_data_pool,
    save_label_pool_snapshot,
    save_proposals,
    update_data_pool,
    update_label_pool,
)
from ov3dsim.geometry import CameraModel, OrientedBox3D, iou3d, project_box
from ov3dsim.scene import NovelObjectSample, ObjectAnnotation, PointCloudScene
from ov3dsim.semantic import build_vocabulary, normalize, toy_oracle


NAMES = ["table", "chair", "bed", "sofa", "lamp", "plant", "bin", "box"]
NUM_BASE = 3  # table, chair, bed are base; the rest novel


def make_world(noise_sigma=0.0, seed=0):
    oracle = toy_oracle(seed, NAMES, noise_sigma=noise_sigma, dim=32)
    vocab = build_vocabulary(NAMES, NUM_BASE, oracle, temperature=100.0)
    return oracle, vocab


def make_scene(objects, camera=True, image_ref="synthetic://s0"):
    """objects: list of (box, category, is_base). Tagged via the caller."""
    annotations = [
        ObjectAnnotation(box, cat, source="base", confidence=1.0)
        for box, cat, is_base in objects
        if is_base
    ]
    cam = None
    if camera:
        k = np.array([[200.0, 0, 160], [0, 200.0, 120], [0, 0, 1]])
        rot = np.eye(3)
        cam = CameraModel(k, rot, np.array([0.0, 0.0, 6.0]))
    rng = np.random.default_rng(42)
    pts = rng.uniform(-3, 3, size=(2000, 3))
    return PointCloudScene(
        points=pts,
        annotations=annotations,
        image_ref=image_ref,
        camera=cam,
        image_size=(320.0, 240.0),
    )


def tag_all(oracle, vocab, scene, objects):
    for box, cat, _ in objects:
        region = project_box(box, scene.camera, scene.image_size)
        oracle.tag_region(scene.image_ref, region, vocab.names[cat])


def proposal_for(box, objectness, feature):
    return Proposal(box, objectness, feature)


class TestDiscover:
    def setup_method(self):
        self.oracle, self.vocab = make_world()
        self.cfg = DiscoveryConfig(theta_g=0.3, theta_s=0.3, dedup_iou=0.25)

    def exact_feature(self, cat):
        return normalize(self.vocab.text_embeddings[cat])

    def test_clean_novel_proposal_discovered(self):
        novel_cat = 5  # plant
        box = OrientedBox3D([1.0, 0.5, 0.5], [1, 1, 1], 0.2)
        objects = [(box, novel_cat, False)]
        scene = make_scene(objects)
        tag_all(self.oracle, self.vocab, scene, objects)
        props = [proposal_for(box, 0.5, self.exact_feature(novel_cat))]
        found = discover(scene, props, self.vocab, self.oracle, self.cfg)
        assert len(found) == 1
        assert found[0].category == novel_cat
        assert found[0].source == "discovered"
        assert found[0].confidence > 0.9

    def test_overlap_with_base_rejected(self):
        base_box = OrientedBox3D([0, 0, 0.5], [1, 1, 1], 0.0)
        novel_box = OrientedBox3D([0.3, 0, 0.5], [1, 1, 1], 0.0)  # IoU well over 0.25
        assert iou3d(base_box, novel_box) >= 0.25
        objects = [(base_box, 0, True), (novel_box, 5, False)]
        scene = make_scene(objects)
        tag_all(self.oracle, self.vocab, scene, objects)
        props = [proposal_for(novel_box, 0.99, self.exact_feature(5))]
        assert discover(scene, props, self.vocab, self.oracle, self.cfg) == []

    def test_base_argmax_rejected(self):
        base_cat = 1  # chair
        box = OrientedBox3D([1.5, 1.0, 0.5], [1, 1, 1], 0.0)
        objects = [(box, base_cat, False)]  # tagged as chair, not annotated
        scene = make_scene(objects)
        tag_all(self.oracle, self.vocab, scene, objects)
        props = [proposal_for(box, 0.9, self.exact_feature(base_cat))]
        assert discover(scene, props, self.vocab, self.oracle, self.cfg) == []

    def test_low_objectness_rejected(self):
        box = OrientedBox3D([1.0, 0.5, 0.5], [1, 1, 1], 0.0)
        objects = [(box, 6, False)]
        scene = make_scene(objects)
        tag_all(self.oracle, self.vocab, scene, objects)
        props = [proposal_for(box, 0.25, self.exact_feature(6))]
        assert discover(scene, props, self.vocab, self.oracle, self.cfg) == []

    def test_behind_camera_proposal_skipped(self):
        box_behind = OrientedBox3D([0, 0, -20.0], [1, 1, 1], 0.0)
        scene = make_scene([])
        props = [proposal_for(box_behind, 0.9, self.exact_feature(5))]
        assert discover(scene, props, self.vocab, self.oracle, self.cfg) == []

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(3)
        objects = []
        for i in range(6):
            box = OrientedBox3D(
                [rng.uniform(-2, 2), rng.uniform(-2, 2), 0.5],
                rng.uniform(0.5, 1.2, 3),
                rng.uniform(-math.pi, math.pi),
            )
            objects.append((box, int(rng.integers(NUM_BASE, len(NAMES))), False))
        oracle, vocab = make_world(noise_sigma=0.35, seed=5)
        scene = make_scene(objects)
        tag_all(oracle, vocab, scene, objects)
        props = [
            proposal_for(box, float(rng.uniform(0.2, 1.0)),
                         normalize(vocab.text_embeddings[cat]))
            for box, cat, _ in objects
        ]

        def discovered_set(theta_g, theta_s):
            cfg = DiscoveryConfig(theta_g=theta_g, theta_s=theta_s, dedup_iou=0.25)
            found = discover(scene, props, vocab, oracle, cfg)
            return {tuple(np.round(a.box.center, 9)) for a in found}

        grid = [0.0, 0.3, 0.5]
        sets = {(g, s): discovered_set(g, s) for g in grid for s in grid}
        for g1 in grid:
            for s1 in grid:
                for g2 in grid:
                    for s2 in grid:
                        if g1 <= g2 and s1 <= s2:
                            assert sets[(g2, s2)] <= sets[(g1, s1)]


class TestLabelPool:
    def ann(self, center, conf, cat=5, yaw=0.0):
        return ObjectAnnotation(
            OrientedBox3D(center, [1, 1, 1], yaw), cat, "discovered", conf
        )

    def test_union_of_disjoint(self):
        pool = LabelPool(dedup_iou=0.25)
        anns = [self.ann([0, 0, 0.5], 0.8), self.ann([3, 0, 0.5], 0.7),
                self.ann([0, 3, 0.5], 0.9)]
        pool = update_label_pool(pool, anns, "s0")
        assert pool.size == 3

    def test_lower_confidence_duplicate_dropped(self):
        pool = update_label_pool(LabelPool(), [self.ann([0, 0, 0.5], 0.8)], "s0")
        dup = self.ann([0.05, 0, 0.5], 0.5)  # IoU about 0.9
        assert iou3d(dup.box, pool.scenes["s0"][0].box) > 0.25
        pool2 = update_label_pool(pool, [dup], "s0")
        assert pool2.size == 1
        assert pool2.scenes["s0"][0].confidence == 0.8

    def test_higher_confidence_duplicate_replaces(self):
        pool = update_label_pool(LabelPool(), [self.ann([0, 0, 0.5], 0.6)], "s0")
        better = self.ann([0.05, 0, 0.5], 0.9)
        pool2 = update_label_pool(pool, [better], "s0")
        assert pool2.size == 1
        assert pool2.scenes["s0"][0].confidence == 0.9

    def test_scenes_kept_separate(self):
        pool = update_label_pool(LabelPool(), [self.ann([0, 0, 0.5], 0.8)], "s0")
        pool = update_label_pool(pool, [self.ann([0, 0, 0.5], 0.7)], "s1")
        assert pool.size == 2

    def test_pairwise_invariant_after_updates(self):
        rng = np.random.default_rng(8)
        pool = LabelPool(dedup_iou=0.25)
        for _ in range(60):
            ann = self.ann(
                [rng.uniform(0, 5), rng.uniform(0, 5), 0.5],
                float(rng.uniform(0.1, 1.0)),
                yaw=float(rng.uniform(-math.pi, math.pi)),
            )
            pool = update_label_pool(pool, [ann], "s0")
        entries = pool.scenes["s0"]
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                assert iou3d(entries[i].box, entries[j].box) < 0.25

    def test_update_is_value_semantic(self):
        pool = LabelPool()
        pool2 = update_label_pool(pool, [self.ann([0, 0, 0.5], 0.8)], "s0")
        assert pool.size == 0 and pool2.size == 1


class TestDataPool:
    def scene_with_points(self):
        rng = np.random.default_rng(9)
        return PointCloudScene(points=rng.uniform(-2, 2, size=(3000, 3)))

    def ann_at(self, center, cat=5):
        return ObjectAnnotation(
            OrientedBox3D(center, [1, 1, 1], 0.3), cat, "discovered", 0.7
        )

    def test_growth_by_two(self):
        scene = self.scene_with_points()
        pool = update_data_pool(DataPool(), scene, [self.ann_at([0, 0, 0]), self.ann_at([1, 1, 1])])
        assert pool.size == 2
        assert all(s.category == 5 for s in pool.samples)
        assert all(s.semantic_prob == 0.7 for s in pool.samples)

    def test_empty_region_skipped(self):
        scene = self.scene_with_points()
        pool = update_data_pool(DataPool(), scene, [self.ann_at([50, 50, 50])])
        assert pool.size == 0

    def test_monotone_growth(self):
        scene = self.scene_with_points()
        pool = DataPool()
        sizes = []
        for center in ([0, 0, 0], [60, 0, 0], [1, 1, 0], [-1, -1, 0]):
            pool = update_data_pool(DataPool(pool.samples), scene, [self.ann_at(center)])
            sizes.append(pool.size)
        assert sizes == sorted(sizes)


class TestSampleEnrichment:
    def make_pool(self, n):
        samples = [
            NovelObjectSample(points=np.zeros((3, 3)), box_size=[1, 1, 1], category=i % 4)
            for i in range(n)
        ]
        return DataPool(samples)

    def test_k_draws(self):
        pool = self.make_pool(100)
        out = sample_enrichment(pool, 5, np.random.default_rng(0))
        assert len(out) == 5

    def test_k_zero(self):
        assert sample_enrichment(self.make_pool(10), 0, np.random.default_rng(0)) == []

    def test_empty_pool(self):
        assert sample_enrichment(DataPool(), 5, np.random.default_rng(0)) == []

    def test_with_replacement(self):
        pool = self.make_pool(1)
        out = sample_enrichment(pool, 4, np.random.default_rng(0))
        assert len(out) == 4
        assert all(s is pool.samples[0] for s in out)


class TestSerialization:
    def test_proposal_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        props = [
            Proposal(
                OrientedBox3D(rng.uniform(-2, 2, 3), rng.uniform(0.5, 1.5, 3), 0.4),
                0.75,
                normalize(rng.standard_normal(16)),
            )
            for _ in range(3)
        ]
        path = str(tmp_path / "props.json")
        save_proposals(path, props)
        back = load_proposals(path)
        assert len(back) == 3
        for a, b in zip(props, back):
            assert np.array_equal(a.box.center, b.box.center)
            assert a.objectness == b.objectness
            assert np.array_equal(a.feature.values, b.feature.values)

    def test_label_pool_snapshot_roundtrip(self, tmp_path):
        pool = update_label_pool(
            LabelPool(),
            [ObjectAnnotation(OrientedBox3D([1, 2, 0.5], [1, 1, 1], 0.1), 4,
                              "discovered", 0.66)],
            "sceneA",
        )
        path = str(tmp_path / "pool.json")
        save_label_pool_snapshot(path, pool, epoch=3)
        epoch, back = load_label_pool_snapshot(path)
        assert epoch == 3
        assert back.size == 1
        assert back.scenes["sceneA"][0].category == 4

    def test_data_pool_archive_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        samples = [
            NovelObjectSample(
                points=rng.uniform(-0.4, 0.4, size=(20, 3)),
                box_size=[1, 1, 1],
                category=3,
                semantic_prob=0.5,
                crop_ref="img0",
            ),
            NovelObjectSample(
                points=rng.uniform(-0.3, 0.3, size=(12, 3)),
                box_size=[0.8, 0.8, 0.8],
                category=6,
                semantic_prob=0.9,
            ),
        ]
        directory = str(tmp_path / "pool")
        save_data_pool(DataPool(samples), directory)
        back = load_data_pool(directory)
        assert back.size == 2
        for a, b in zip(samples, back.samples):
            assert np.array_equal(a.points, b.points)
            assert np.array_equal(a.box_size, b.box_size)
            assert (a.category, a.semantic_prob, a.crop_ref) == (
                b.category, b.semantic_prob, b.crop_ref,
            )
        assert back.category_counts() == {3: 1, 6: 1}
