import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advirl.classifier import (
    ClassifierError,
    HistogramClassifier,
    LabelSpace,
    LinearClassifier,
    Prediction,
    PredictionSet,
    build_classifier,
    classify,
    classify_batch,
    color_histogram,
    filter_views,
    histogram_classifier,
    linear_classifier,
    save_linear_weights,
)
from advirl.field import FieldGeometry, fixture_field, render_rig
from advirl.imaging import Image
from advirl.scene import CameraRig, look_at, orbit_rig, Camera

RB = {"red": (1.0, 0.0, 0.0), "blue": (0.0, 0.0, 1.0)}
unit = st.floats(0.0, 1.0)


def image_strategy():
    return arrays(np.float64, (4, 4, 3), elements=unit).map(Image)


class TestPredictionTypes:
    def test_confidence_range(self):
        with pytest.raises(ClassifierError):
            Prediction("a", 1.5)

    def test_sorted_and_non_empty(self):
        with pytest.raises(ClassifierError):
            PredictionSet(())
        with pytest.raises(ClassifierError):
            PredictionSet((Prediction("a", 0.2), Prediction("b", 0.8)))
        ps = PredictionSet.from_scores(["a", "b", "c"], [0.2, 0.5, 0.3])
        assert [p.label for p in ps] == ["b", "c", "a"]
        assert ps.top.label == "b"
        assert ps.confidence_of("a") == 0.2

    def test_label_space(self):
        with pytest.raises(ClassifierError):
            LabelSpace(("a",))
        with pytest.raises(ClassifierError):
            LabelSpace(("a", "b", "a"))


class TestHistogramClassifier:
    def test_prototype_identity(self):
        model = histogram_classifier(["red", "blue"], RB, temperature=1.0)
        ps = classify(model, Image.constant(3, 3, RB["red"]))
        assert ps.top.label == "red"
        # distances 0 and 2 -> softmax(0, -2)
        assert ps.top.confidence == pytest.approx(1 / (1 + math.exp(-2)), rel=1e-12)

    def test_equidistant_is_uniform(self):
        model = histogram_classifier(["red", "blue"], RB, temperature=1.0)
        ps = classify(model, Image.constant(2, 2, (0.5, 0, 0.5)))
        assert [p.confidence for p in ps] == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_bad_prototypes(self):
        with pytest.raises(ClassifierError):
            HistogramClassifier(["red", "blue"], {"red": (1, 0, 0)})
        with pytest.raises(ClassifierError):
            HistogramClassifier(["red", "blue"], [(1, 0, 0)])
        with pytest.raises(ClassifierError):
            HistogramClassifier(["red", "blue"], RB, temperature=0.0)

    def test_input_size_enforced(self):
        model = HistogramClassifier(["red", "blue"], RB, input_size=(4, 4))
        with pytest.raises(ClassifierError):
            model.classify(Image.constant(3, 4, (0, 0, 0)))

    @given(image_strategy())
    @settings(max_examples=40, deadline=None)
    def test_pure_and_normalized(self, img):
        model = histogram_classifier(["red", "blue", "green"],
                                     {**RB, "green": (0, 1, 0)}, temperature=0.3)
        a, b = model.classify(img), model.classify(img)
        assert a == b
        assert sum(p.confidence for p in a) == pytest.approx(1.0, abs=1e-6)

    @given(image_strategy(), st.permutations([0, 1, 2]))
    @settings(max_examples=40, deadline=None)
    def test_label_order_equivariance(self, img, perm):
        labels = ["red", "blue", "green"]
        protos = [RB["red"], RB["blue"], (0, 1, 0)]
        base = HistogramClassifier(labels, protos, 0.5).classify(img)
        permuted = HistogramClassifier([labels[i] for i in perm], [protos[i] for i in perm],
                                       0.5).classify(img)
        for label in labels:
            assert permuted.confidence_of(label) == pytest.approx(base.confidence_of(label),
                                                                  abs=1e-15)


class TestLinearClassifier:
    def test_zero_weights_uniform(self):
        labels = ["a", "b", "c"]
        model = LinearClassifier(labels, np.zeros((3, 3 * 4 ** 3)), np.zeros(3))
        ps = model.classify(Image(np.random.default_rng(0).random((5, 5, 3))))
        assert all(p.confidence == pytest.approx(1 / 3, abs=1e-15) for p in ps)

    def test_shape_validation(self):
        with pytest.raises(ClassifierError):
            LinearClassifier(["a", "b"], np.zeros((2, 10)), np.zeros(2))
        with pytest.raises(ClassifierError):
            LinearClassifier(["a", "b"], np.zeros((2, 24)), np.zeros(3), bins=2)

    def test_weights_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        model = LinearClassifier(["x", "y"], rng.normal(size=(2, 24)), rng.normal(size=2), bins=2)
        path = tmp_path / "w.json"
        save_linear_weights(model, path)
        loaded = linear_classifier(["x", "y"], path)
        img = Image(rng.random((6, 6, 3)))
        assert loaded.classify(img) == model.classify(img)
        with pytest.raises(ClassifierError):
            linear_classifier(["y", "x"], path)
        with pytest.raises(ClassifierError):
            linear_classifier(None, tmp_path / "missing.json")

    @given(image_strategy())
    @settings(max_examples=30, deadline=None)
    def test_normalized(self, img):
        rng = np.random.default_rng(2)
        model = LinearClassifier(["a", "b", "c"], rng.normal(size=(3, 24)), rng.normal(size=3),
                                 bins=2)
        assert sum(p.confidence for p in model.classify(img)) == pytest.approx(1.0, abs=1e-6)


class TestColorHistogram:
    def test_length_and_mass(self):
        img = Image(np.random.default_rng(3).random((5, 7, 3)))
        feats = color_histogram(img, bins=3)
        assert feats.shape == (3 * 27,)
        np.testing.assert_allclose(feats.reshape(27, 3).sum(axis=0), img.mean_color(), atol=1e-12)

    def test_single_color_lands_in_one_bin(self):
        feats = color_histogram(Image.constant(2, 2, (0.9, 0.1, 0.6)), bins=2).reshape(8, 3)
        nonzero = np.flatnonzero(feats.sum(axis=1))
        assert nonzero.tolist() == [(1 * 2 + 0) * 2 + 1]


class TestFilterViews:
    def test_all_and_none(self):
        model = histogram_classifier(["red", "blue"], RB)
        reds = [Image.constant(2, 2, (0.9, 0, 0.1))] * 3
        assert filter_views(model, reds, "red") == [0, 1, 2]
        assert filter_views(model, reds, "blue") == []

    def test_camera_facing_away_is_dropped(self):
        geom = FieldGeometry(resolution=8)
        rig = orbit_rig(4, 1.5, 0.3, resolution=16, focal=44)  # sphere fills the frame
        away = rig[2].position + (rig[2].position - np.array([0.5, 0.5, 0.5]))
        cams = list(rig)
        c = cams[2]
        cams[2] = Camera(c.width, c.height, c.fx, c.fy, c.cx, c.cy, look_at(c.position, away))
        images = render_rig(fixture_field("sphere", geom), CameraRig(tuple(cams)))
        model = histogram_classifier(["red", "blue", "empty"], {**RB, "empty": (0, 0, 0)},
                                     temperature=0.1)
        assert filter_views(model, images, "red") == [0, 1, 3]

    def test_empty_input(self):
        with pytest.raises(ClassifierError):
            filter_views(histogram_classifier(["red", "blue"], RB), [], "red")


def test_classify_batch_preserves_order():
    model = histogram_classifier(["red", "blue"], RB)
    imgs = [Image.constant(1, 1, c) for c in [(1, 0, 0), (0, 0, 1), (0.8, 0, 0.1)]]
    assert [ps.top.label for ps in classify_batch(model, imgs)] == ["red", "blue", "red"]


class TestBuildClassifier:
    def test_histogram(self):
        model = build_classifier({"kind": "histogram", "labels": ["red", "blue"],
                                  "prototypes": RB, "temperature": 0.2})
        assert model.temperature == 0.2

    def test_rejects_unknown(self):
        with pytest.raises(ClassifierError):
            build_classifier({"kind": "cnn"})
        with pytest.raises(ClassifierError):
            build_classifier({"kind": "histogram", "labels": ["a", "b"],
                              "prototypes": [[0, 0, 0], [1, 1, 1]], "colour": 1})
        with pytest.raises(ClassifierError):
            build_classifier({"kind": "linear"})
