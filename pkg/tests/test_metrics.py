import json
import logging

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from ssl_cr.errors import ArgumentError, UndefinedMetricError
from ssl_cr.metrics import (
    SLIDE_FEATURE_NAMES,
    accuracy,
    anova_mean_squares,
    auc_delong,
    build_heatmap,
    classification_report,
    delong_test,
    export_heatmap,
    icc,
    macro_auc_ovr,
    predict_slide,
    regression_report,
    slide_features,
    train_slide_classifier,
    weighted_f1,
)


###################
# AUC
###################
def _pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_matches_pairwise_count_with_ties():
    rng = np.random.default_rng(0)
    scores = np.round(rng.random(60), 1)
    labels = (rng.random(60) < 0.4).astype(int)
    result = auc_delong(scores, labels)
    assert result.auc == pytest.approx(_pairwise_auc(scores, labels), abs=1e-12)
    assert result.auc == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)
    assert 0.0 <= result.low <= result.auc <= result.high <= 1.0
    assert result.variance > 0


def test_auc_matches_pairwise_count_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = np.zeros(n, dtype=int)
        labels[rng.permutation(n)[: int(rng.integers(1, n))]] = 1
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert auc_delong(scores, labels).auc == pytest.approx(_pairwise_auc(scores, labels), abs=1e-12)


def test_separated_scores_give_perfect_auc():
    result = auc_delong([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert result.auc == 1.0
    assert result.high == 1.0


def test_auc_with_one_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auc_delong([0.1, 0.9], [1, 1])
    with pytest.raises(ArgumentError):
        auc_delong([0.1, 0.9], [0, 2])


def test_delong_test_is_symmetric():
    rng = np.random.default_rng(1)
    labels = (rng.random(50) < 0.5).astype(int)
    a = auc_delong(labels + rng.normal(0, 0.8, 50), labels)
    b = auc_delong(labels + rng.normal(0, 1.5, 50), labels)
    assert delong_test(a, b) == pytest.approx(delong_test(b, a))
    assert 0.0 <= delong_test(a, b) <= 1.0
    assert delong_test(a, a) == 1.0


def test_macro_auc_averages_classes():
    probs = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.6, 0.3, 0.1]])
    assert macro_auc_ovr(probs, [0, 1, 2, 0]) == pytest.approx(1.0)


###################
# ICC
###################
def test_icc_of_identical_raters_is_one():
    x = np.linspace(0, 1, 10)
    result = icc(np.column_stack([x, x]))
    assert (result.coefficient, result.low, result.high) == (1.0, 1.0, 1.0)


def test_icc_penalizes_a_constant_offset():
    x = np.linspace(0, 1, 10)
    result = icc(np.column_stack([x, x + 0.1]))
    assert result.coefficient < 1.0
    assert result.low <= result.coefficient <= result.high


def test_icc_reference_value():
    # six subjects rated by four judges; absolute-agreement single measure is 0.29
    ratings = np.array([[9, 2, 5, 8], [6, 1, 3, 2], [8, 4, 6, 8], [7, 1, 2, 6], [10, 5, 6, 9], [6, 2, 4, 7]])
    result = icc(ratings)
    assert result.coefficient == pytest.approx(0.29, abs=0.005)
    assert result.low < result.coefficient < result.high


def test_mean_squares_match_loops():
    rng = np.random.default_rng(2)
    x = rng.random((7, 3))
    n, k = x.shape
    grand = x.mean()
    ss_r = sum(k * (x[i].mean() - grand) ** 2 for i in range(n))
    ss_c = sum(n * (x[:, j].mean() - grand) ** 2 for j in range(k))
    ss_e = sum((x[i, j] - x[i].mean() - x[:, j].mean() + grand) ** 2 for i in range(n) for j in range(k))
    ms = anova_mean_squares(x)
    assert ms["msr"] == pytest.approx(ss_r / (n - 1))
    assert ms["msc"] == pytest.approx(ss_c / (k - 1))
    assert ms["mse"] == pytest.approx(ss_e / ((n - 1) * (k - 1)))


def test_icc_degenerate_subjects():
    result = icc(np.full((5, 2), 0.5))
    assert result.coefficient == 0.0
    assert result.degenerate


@pytest.mark.parametrize("ratings", [np.zeros((1, 2)), np.zeros((4, 1)), np.array([[0.1, np.nan], [0.2, 0.3]])])
def test_icc_rejects_bad_shapes(ratings):
    with pytest.raises(ArgumentError):
        icc(ratings)


###################
# Accuracy and F1
###################
def test_accuracy_and_weighted_f1_by_hand():
    preds = [0, 0, 1, 1, 2, 2]
    labels = [0, 1, 1, 1, 2, 0]
    assert accuracy(preds, labels) == pytest.approx(4 / 6)
    # per-class F1: 0 -> 0.5 (2 true), 1 -> 0.8 (3 true), 2 -> 2/3 (1 true)
    expected = (2 * 0.5 + 3 * 0.8 + 1 * (2 / 3)) / 6
    assert weighted_f1(preds, labels) == pytest.approx(expected)


def test_accuracy_input_checks():
    with pytest.raises(ArgumentError):
        accuracy([0, 1], [0])
    with pytest.raises(UndefinedMetricError):
        weighted_f1([], [])


###################
# Heatmaps
###################
def test_single_cell_heatmap():
    heatmap = build_heatmap([0.7], [(16, 16)], stride=32, origin=(16, 16))
    assert heatmap.values.shape == (1, 1)
    features = slide_features(heatmap)
    assert features.shape == (len(SLIDE_FEATURE_NAMES),)
    assert features.tolist() == pytest.approx([0.7, 0.7, 1.0, 0.0, 1.0, 1.0, 0.7])


def test_zero_heatmap_features():
    coords = [(x, y) for y in range(0, 96, 32) for x in range(0, 96, 32)]
    features = slide_features(build_heatmap([0.0] * 9, coords, stride=32))
    assert features.tolist() == [0.0] * 7


def test_heatmap_coordinates_round_trip():
    coords = [(16 + 32 * c, 16 + 32 * r) for r in range(3) for c in range(4)]
    heatmap = build_heatmap(np.linspace(0, 1, 12), coords, stride=32, origin=(16, 16))
    assert heatmap.values.shape == (3, 4)
    for x, y in coords:
        assert heatmap.cell_center(*heatmap.cell_of(x, y)) == (x, y)
    with pytest.raises(ArgumentError):
        heatmap.cell_of(20, 16)


def test_duplicate_cells_keep_the_last_prediction(caplog):
    with caplog.at_level(logging.WARNING):
        heatmap = build_heatmap([0.2, 0.6], [(0, 0), (0, 0)], stride=32)
    assert heatmap.values[0, 0] == 0.6
    assert "duplicate" in caplog.text


def test_heatmap_rejects_out_of_range_predictions():
    with pytest.raises(ArgumentError):
        build_heatmap([1.2], [(0, 0)], stride=32)


def _flood_fill_components(mask):
    seen = np.zeros_like(mask, dtype=bool)
    areas = []
    for r in range(mask.shape[0]):
        for c in range(mask.shape[1]):
            if not mask[r, c] or seen[r, c]:
                continue
            stack, area = [(r, c)], 0
            seen[r, c] = True
            while stack:
                i, j = stack.pop()
                area += 1
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    a, b = i + di, j + dj
                    if 0 <= a < mask.shape[0] and 0 <= b < mask.shape[1] and mask[a, b] and not seen[a, b]:
                        seen[a, b] = True
                        stack.append((a, b))
            areas.append(area)
    return areas


def test_components_match_flood_fill():
    rng = np.random.default_rng(3)
    for _ in range(5):
        probs = rng.random((12, 12))
        coords = [(c * 32, r * 32) for r in range(12) for c in range(12) if rng.random() > 0.1]
        values = [probs[y // 32, x // 32] for x, y in coords]
        heatmap = build_heatmap(values, coords, stride=32, shape=(12, 12))
        areas = _flood_fill_components(np.nan_to_num(heatmap.values, nan=0.0) >= 0.5)
        features = dict(zip(SLIDE_FEATURE_NAMES, slide_features(heatmap)))
        assert features["component_count"] == len(areas)
        assert features["largest_component_area"] == max(areas)


def test_empty_heatmap_is_undefined():
    with pytest.raises(UndefinedMetricError):
        slide_features(build_heatmap([], [], stride=32, shape=(2, 2)))


def test_export_heatmap_writes_png_and_geometry(tmp_path):
    heatmap = build_heatmap([0.1, 0.9], [(0, 0), (32, 0)], stride=32)
    path = export_heatmap(heatmap, tmp_path / "slide.png", title="slide")
    assert path.exists()
    assert json.loads(path.with_suffix(".json").read_text()) == {"origin": [0, 0], "shape": [1, 2], "stride": 32}


###################
# Slide classifier and reports
###################
def test_slide_classifier_probabilities():
    rng = np.random.default_rng(4)
    normal = rng.normal(0.0, 0.1, (10, 7))
    tumor = rng.normal(1.0, 0.1, (10, 7))
    classifier = train_slide_classifier(np.vstack([normal, tumor]), [0] * 10 + [1] * 10)
    p = predict_slide(classifier, np.vstack([normal[:3], tumor[:3]]))
    assert ((p >= 0) & (p <= 1)).all()
    assert p[:3].max() < 0.5 < p[3:].min()
    with pytest.raises(UndefinedMetricError):
        train_slide_classifier(normal, [0] * 10)


def test_regression_report_for_perfect_predictions():
    truth = np.linspace(0.05, 0.95, 12)
    raters = np.column_stack([truth, np.clip(truth + 0.05, 0, 1)])
    report = regression_report("run-x", truth, truth, raters)
    assert report.metrics["mse"] == 0.0
    assert report.metrics["icc_truth"] == 1.0
    assert report.metrics["icc_rater2"] < 1.0
    assert set(report.intervals) == {"icc_truth", "icc_rater1", "icc_rater2"}


def test_classification_report_flags_undefined_auc(tmp_path):
    probs = np.array([[0.9, 0.1], [0.7, 0.3], [0.4, 0.6]])
    report = classification_report("run-y", probs, np.array([0, 0, 0]))
    assert report.metrics["accuracy"] == pytest.approx(2 / 3)
    assert "auc" not in report.metrics
    assert any(flag.startswith("auc_undefined") for flag in report.flags)
    written = json.loads(report.write(tmp_path / "report.json").read_text())
    assert written["run_id"] == "run-y"
