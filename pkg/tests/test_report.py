import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from advirl.classifier import PredictionSet, histogram_classifier
from advirl.field import FieldGeometry, RadianceField, fixture_field, param_count
from advirl.report import (
    HISTORY_COLUMNS,
    evaluate_field,
    history_csv,
    read_history,
    read_views_csv,
    report_from_predictions,
    write_history,
)
from advirl.scene import orbit_rig

RB = {"red": (1.0, 0.0, 0.0), "blue": (0.0, 0.0, 1.0)}


def test_unattacked_fixture_is_all_red():
    geom = FieldGeometry(resolution=8)
    rig = orbit_rig(8, 1.5, 0.3, resolution=16, focal=22)
    report = evaluate_field(fixture_field("sphere", geom), rig,
                            histogram_classifier(["red", "blue"], RB, 0.1))
    assert report.counts_lines() == ["8 out of 8 views classified as red"]
    assert report.n_views == 8


def test_single_view_rig_gives_one_row():
    geom = FieldGeometry(resolution=4)
    report = evaluate_field(fixture_field("sphere", geom), orbit_rig(1, 1.5, 0.3, resolution=8),
                            histogram_classifier(["red", "blue"], RB))
    assert len(report.rows) == 1


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
@settings(max_examples=15, deadline=None)
def test_counts_partition_views(seed, n):
    geom = FieldGeometry(resolution=3, samples_per_ray=6)
    params = np.random.default_rng(seed).normal(0, 3, param_count(geom))
    model = histogram_classifier(["red", "blue", "green"], {**RB, "green": (0, 1, 0)}, 0.2)
    report = evaluate_field(RadianceField(geom, params), orbit_rig(n, 1.4, 0.2, resolution=4),
                            model)
    assert sum(s.count for s in report.summary.values()) == n
    for label, s in report.summary.items():
        assert s.count == sum(r.label == label for r in report.rows)


def test_text_and_csv(tmp_path):
    preds = [PredictionSet.from_scores(["red", "blue"], p)
             for p in ([0.9, 0.1], [0.3, 0.7], [0.6, 0.4])]
    report = report_from_predictions(preds, best_reward=12.5, final_reward=3.0)
    text = report.to_text()
    assert "2 out of 3 views classified as red" in text
    assert "1 out of 3 views classified as blue" in text
    assert "reward: best 12.500000, final 3.000000" in text
    report.write(tmp_path, "x")
    rows = read_views_csv(tmp_path / "x_views.csv")
    assert [(r.view, r.label, r.confidence) for r in rows] == [
        (0, "red", 0.9), (1, "blue", 0.7), (2, "red", 0.6)]
    classes = (tmp_path / "x_classes.csv").read_text().splitlines()
    assert classes[0] == "label,avg_confidence,count"
    assert classes[1] == "red,0.75,2"


def test_history_round_trip(tmp_path):
    rows = [{"step": i, "episode": i // 2, "reward": 0.1 * i, "target_avg_conf": 1 / 3,
             "true_avg_conf": 0.0, "mse": 1e-7 * i, "target_count": i % 3} for i in range(5)]
    path = tmp_path / "h.csv"
    write_history(rows, path)
    assert path.read_text().splitlines()[0] == ",".join(HISTORY_COLUMNS)
    assert read_history(path) == rows
    assert history_csv(read_history(path)) == path.read_text()
