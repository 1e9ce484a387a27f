import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from relevanceflow.partseg import (
    PartDetector,
    UnsupervisedPartSegmenter,
    box_labels,
    build_detectors,
    detector_candidates,
    matched_part_iou,
    miou,
    segment,
)

from . import oracles


def box_detector(lo, hi, margin=0.0, std=0.0):
    return PartDetector("conv1", frozenset({"red"}), 0, np.asarray(lo, float),
                        np.asarray(hi, float), margin, np.full(3, std))


def two_clusters(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1.0, -0.5, size=(20, 3))
    b = rng.uniform(0.5, 1.0, size=(20, 3))
    return np.vstack([a, b]), np.repeat([0, 1], 20)


class TestDetector:
    def test_rejects_inverted_box(self):
        with pytest.raises(ValueError):
            box_detector([1, 0, 0], [0, 0, 0])

    def test_rejects_negative_margin(self):
        with pytest.raises(ValueError):
            box_detector([0, 0, 0], [1, 1, 1], margin=-0.1)

    def test_margin_expands_box(self):
        det = box_detector([0, 0, 0], [1, 1, 1], margin=0.02)
        assert det.contains(np.array([[1.01, 0.5, 0.5], [1.03, 0.5, 0.5]])).tolist() == [True,
                                                                                        False]

    def test_identical_clouds_qualify(self):
        rng = np.random.default_rng(0)
        cloud = rng.normal(size=(30, 3))
        sal = rng.uniform(size=30)
        clouds = np.stack([cloud] * 5)
        per_layer = {"a": np.stack([sal] * 5), "b": np.stack([sal[::-1]] * 5)}
        dets = build_detectors(None, ["a", "b"], clouds, np.zeros(5, int),
                               salience_by_layer=per_layer)
        assert [d.layer for d in dets[0]] == ["a", "b"]
        assert all(d.stability < 1e-12 for d in dets[0])

    def test_shuffled_salience_disqualified(self):
        rng = np.random.default_rng(1)
        cloud = rng.uniform(-1, 1, size=(200, 3))
        sal = np.where(cloud[:, 0] > 0.6, 1.0, 0.0)
        clouds = np.stack([cloud] * 20)
        shuffled = np.stack([rng.permutation(sal) for _ in range(20)])
        steady = detector_candidates(clouds, {"x": np.stack([sal] * 20)})[0]
        noisy = detector_candidates(clouds, {"x": shuffled})[0]
        assert steady.stability == pytest.approx(0.0, abs=1e-12)
        assert noisy.stability > 0.05
        dets = build_detectors(None, ["x"], clouds, np.zeros(20, int),
                               salience_by_layer={"x": shuffled})
        assert dets == {0: []}

    def test_to_dict(self):
        d = box_detector([0, 0, 0], [1, 1, 1]).to_dict()
        assert d["tiers"] == ["red"] and d["box_max"] == [1.0, 1.0, 1.0]


class TestSegment:
    def test_whole_cloud_box(self):
        cloud, _ = two_clusters()
        seg = segment(cloud, [box_detector([-1, -1, -1], [1, 1, 1])])
        assert seg.fired and np.all(seg.labels == 0)

    def test_two_boxes_exact(self):
        cloud, truth = two_clusters()
        dets = [box_detector([-1, -1, -1], [-0.5, -0.5, -0.5]),
                box_detector([0.5, 0.5, 0.5], [1, 1, 1])]
        np.testing.assert_array_equal(segment(cloud, dets).labels, truth)

    def test_nearest_neighbor_completion(self):
        cloud, truth = two_clusters()
        dets = [box_detector([-1, -1, -1], [-0.7, -0.7, -0.7]),
                box_detector([0.8, 0.8, 0.8], [1, 1, 1])]
        labels = segment(cloud, dets).labels
        assert np.all(labels >= 0)
        np.testing.assert_array_equal(labels, truth)

    def test_nothing_fires(self):
        cloud, _ = two_clusters()
        with pytest.warns(RuntimeWarning):
            seg = segment(cloud, [box_detector([5, 5, 5], [6, 6, 6])])
        assert not seg.fired and np.all(seg.labels == -1)

    def test_needs_a_detector(self):
        with pytest.raises(ValueError):
            segment(np.zeros((3, 3)), [])

    @given(st.integers(0, 2**32 - 1))
    def test_adding_detector_never_shrinks_coverage(self, seed):
        rng = np.random.default_rng(seed)
        cloud = rng.uniform(-1, 1, size=(50, 3))
        dets = []
        for _ in range(4):
            lo = rng.uniform(-1, 0.5, size=3)
            dets.append(box_detector(lo, lo + rng.uniform(0, 1, size=3)))
        covered = [np.sum(box_labels(cloud, dets[:i]) >= 0) for i in range(5)]
        assert covered == sorted(covered)

    def test_deterministic(self):
        cloud, _ = two_clusters(3)
        dets = [box_detector([-1, -1, -1], [0, 0, 0]), box_detector([-0.2] * 3, [1, 1, 1])]
        np.testing.assert_array_equal(segment(cloud, dets).labels, segment(cloud, dets).labels)


class TestMiou:
    def test_perfect(self):
        truth = np.array([[0, 0, 1, 1]])
        assert miou(truth, truth, [0])["miou"] == 1.0

    def test_permuted_ids(self):
        assert miou(np.array([[5, 5, 2, 2]]), np.array([[0, 0, 1, 1]]), [0])["miou"] == 1.0

    def test_single_part_against_two_equal_parts(self):
        pred, truth = [0, 0, 0, 0], [0, 0, 1, 1]
        assert oracles.matched_miou(pred, truth) == 0.25
        assert miou(np.array([pred]), np.array([truth]), [0])["miou"] == 0.25

    def test_unassigned_scores_zero(self):
        parts, scores = matched_part_iou([-1, -1], [0, 1])
        assert scores.tolist() == [0.0, 0.0]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            miou(np.zeros((1, 3)), np.zeros((1, 4)), [0])

    @given(st.lists(st.integers(-1, 3), min_size=1, max_size=9), st.data())
    def test_matches_enumeration(self, pred, data):
        truth = data.draw(st.lists(st.integers(0, 2), min_size=len(pred), max_size=len(pred)))
        got = miou(np.array([pred]), np.array([truth]), [0])["miou"]
        assert got == pytest.approx(oracles.matched_miou(pred, truth), abs=1e-12)
        assert 0.0 <= got <= 1.0

    def test_per_class_rows(self):
        out = miou(np.array([[0, 1], [0, 0]]), np.array([[0, 1], [0, 1]]), [0, 1],
                   class_names=["a", "b"])
        assert [(r["class"], r["miou"]) for r in out["classes"]] == [("a", 1.0), ("b", 0.25)]
        assert out["miou"] == pytest.approx(0.625)


class TestEstimator:
    def test_clone_keeps_params(self):
        est = UnsupervisedPartSegmenter(q=0.1, margin=0.0)
        assert clone(est).get_params()["q"] == 0.1

    def test_fit_predict_shapes(self, tiny_pn2, tiny_data):
        est = UnsupervisedPartSegmenter(tiny_pn2, q=1.0).fit(tiny_data["X_train"],
                                                             tiny_data["y_train"])
        assert all(d for d in est.detectors_.values())
        pred = est.predict(tiny_data["X_test"], tiny_data["y_test"])
        assert pred.shape == tiny_data["X_test"].shape[:2]
        assert np.all(pred >= 0)
        score = est.score(tiny_data["X_test"], tiny_data["y_test"], tiny_data["parts_test"])
        assert 0.0 <= score <= 1.0
