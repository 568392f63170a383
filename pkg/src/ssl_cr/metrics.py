"""Evaluation statistics: ICC, DeLong AUC, accuracy, weighted F1 and slide-level aggregation."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from pydantic import BaseModel, Field  # noqa: E402
from scipy import ndimage, stats  # noqa: E402
from scipy.special import expit  # noqa: E402
from sklearn.metrics import accuracy_score, f1_score  # noqa: E402
from sklearn.pipeline import Pipeline, make_pipeline  # noqa: E402
from sklearn.preprocessing import StandardScaler  # noqa: E402
from sklearn.svm import LinearSVC  # noqa: E402

from ssl_cr.errors import ArgumentError, UndefinedMetricError  # noqa: E402

logger = logging.getLogger(__name__)

ICC_VARIANT = "ICC(A,1) two-way random, single measure, absolute agreement"
SLIDE_FEATURES_VERSION = 1
SLIDE_FEATURE_NAMES = (
    "max_prob",
    "mean_prob",
    "frac_ge_0.5",
    "frac_ge_0.9",
    "largest_component_area",
    "component_count",
    "largest_component_mean",
)


###################
# ICC
###################
@dataclass
class IccResult:
    coefficient: float
    low: float
    high: float
    variant: str = ICC_VARIANT
    degenerate: bool = False
    mean_squares: dict[str, float] = field(default_factory=dict)


def anova_mean_squares(ratings: np.ndarray) -> dict[str, float]:
    """Two-way ANOVA mean squares for subjects (rows), raters (columns) and error."""
    x = np.asarray(ratings, dtype=np.float64)
    n, k = x.shape
    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    ss_rows = k * np.sum((row_means - grand) ** 2)
    ss_cols = n * np.sum((col_means - grand) ** 2)
    ss_error = np.sum((x - row_means[:, None] - col_means[None, :] + grand) ** 2)
    return {
        "msr": float(ss_rows / (n - 1)),
        "msc": float(ss_cols / (k - 1)),
        "mse": float(ss_error / ((n - 1) * (k - 1))),
    }


def icc(ratings: np.ndarray, confidence: float = 0.95) -> IccResult:
    """Single-measure absolute-agreement ICC with an F-distribution confidence interval.

    Args:
        ratings: n x k matrix, one row per subject and one column per rater.
        confidence: Two-sided interval coverage.

    Returns:
        IccResult. Zero between-subject variance yields coefficient 0 flagged degenerate.
    """
    x = np.asarray(ratings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ArgumentError(f"ICC needs an n x k matrix with n, k >= 2, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ArgumentError("ICC ratings must be finite")
    n, k = x.shape
    ms = anova_mean_squares(x)
    msr, msc, mse = ms["msr"], ms["msc"], ms["mse"]

    if msr == 0.0:
        logger.warning("[metrics] ICC degenerate: zero between-subject variance")
        return IccResult(0.0, 0.0, 0.0, degenerate=True, mean_squares=ms)
    if mse == 0.0 and msc == 0.0:
        return IccResult(1.0, 1.0, 1.0, mean_squares=ms)

    coefficient = (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)
    if coefficient >= 1.0:
        return IccResult(float(coefficient), 1.0, 1.0, mean_squares=ms)

    tail = (1.0 - confidence) / 2.0
    a = k * coefficient / (n * (1.0 - coefficient))
    b = 1.0 + k * coefficient * (n - 1) / (n * (1.0 - coefficient))
    v = (a * msc + b * mse) ** 2 / ((a * msc) ** 2 / (k - 1) + (b * mse) ** 2 / ((n - 1) * (k - 1)))
    f_upper = stats.f.ppf(1.0 - tail, n - 1, v)
    f_lower = stats.f.ppf(1.0 - tail, v, n - 1)
    low = n * (msr - f_upper * mse) / (f_upper * (k * msc + (k * n - k - n) * mse) + n * msr)
    high = n * (f_lower * msr - mse) / (k * msc + (k * n - k - n) * mse + n * f_lower * msr)
    low = float(np.clip(min(low, coefficient), -1.0, 1.0))
    high = float(np.clip(max(high, coefficient), -1.0, 1.0))
    return IccResult(float(coefficient), low, high, mean_squares=ms)


###################
# AUC with DeLong variance
###################
@dataclass
class AucResult:
    """AUC with DeLong structural components kept for paired tests."""

    auc: float
    variance: float
    low: float
    high: float
    labels: np.ndarray
    v10: np.ndarray
    v01: np.ndarray
    p_value: Optional[float] = None

    def summary(self) -> dict[str, float]:
        out = {"auc": self.auc, "variance": self.variance, "low": self.low, "high": self.high}
        if self.p_value is not None:
            out["p_value"] = self.p_value
        return out


def _binary_labels(labels: Sequence) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ArgumentError("Labels must be a 1-D vector")
    values = set(np.unique(y).tolist())
    if not values <= {0, 1, False, True}:
        raise ArgumentError(f"Binary labels must be 0/1, got {sorted(values)}")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return y


def auc_delong(scores: Sequence[float], labels: Sequence[int], confidence: float = 0.95) -> AucResult:
    """AUC as the normalized Mann-Whitney statistic with DeLong variance and clipped CI."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise ArgumentError("Scores and labels differ in length")
    pos, neg = s[y], s[~y]
    m, n = len(pos), len(neg)

    ranks = stats.rankdata(s)
    pos_ranks = stats.rankdata(pos)
    neg_ranks = stats.rankdata(neg)
    u = ranks[y].sum() - m * (m + 1) / 2.0
    auc = float(u / (m * n))

    v10 = (ranks[y] - pos_ranks) / n
    v01 = 1.0 - (ranks[~y] - neg_ranks) / m
    s10 = np.var(v10, ddof=1) if m > 1 else 0.0
    s01 = np.var(v01, ddof=1) if n > 1 else 0.0
    variance = float(s10 / m + s01 / n)
    z = stats.norm.ppf(1.0 - (1.0 - confidence) / 2.0)
    half = z * np.sqrt(max(variance, 0.0))
    low, high = float(np.clip(auc - half, 0.0, 1.0)), float(np.clip(auc + half, 0.0, 1.0))
    return AucResult(auc, variance, low, high, y, v10, v01)


def delong_test(a: AucResult, b: AucResult) -> float:
    """Two-tailed p-value for the difference of two paired AUCs."""
    if not np.array_equal(a.labels, b.labels):
        raise ArgumentError("Paired DeLong test needs the same test items")
    m, n = len(a.v10), len(a.v01)
    cov10 = np.cov(np.vstack([a.v10, b.v10])) if m > 1 else np.zeros((2, 2))
    cov01 = np.cov(np.vstack([a.v01, b.v01])) if n > 1 else np.zeros((2, 2))
    var = (cov10[0, 0] + cov10[1, 1] - 2 * cov10[0, 1]) / m + (cov01[0, 0] + cov01[1, 1] - 2 * cov01[0, 1]) / n
    if var <= 0:
        return 1.0
    z = abs(a.auc - b.auc) / np.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def macro_auc_ovr(probs: np.ndarray, labels: Sequence[int]) -> float:
    """Mean one-vs-rest AUC over classes that have both positives and negatives."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or len(p) != len(y):
        raise ArgumentError("Expected (N, C) probabilities aligned with labels")
    aucs = []
    for c in range(p.shape[1]):
        target = y == c
        if target.all() or not target.any():
            continue
        aucs.append(auc_delong(p[:, c], target.astype(int)).auc)
    if not aucs:
        raise UndefinedMetricError("No class has both positive and negative examples")
    return float(np.mean(aucs))


###################
# Classification
###################
def _aligned(preds: Sequence, labels: Sequence) -> tuple[np.ndarray, np.ndarray]:
    p, y = np.asarray(preds), np.asarray(labels)
    if p.shape != y.shape:
        raise ArgumentError(f"Predictions {p.shape} and labels {y.shape} differ in length")
    if p.size == 0:
        raise UndefinedMetricError("No predictions to score")
    return p, y


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    p, y = _aligned(preds, labels)
    return float(accuracy_score(y, p))


def weighted_f1(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Support-weighted mean of per-class F1."""
    p, y = _aligned(preds, labels)
    return float(f1_score(y, p, average="weighted", zero_division=0))


###################
# Heatmaps and slide classification
###################
@dataclass
class Heatmap:
    """Tumor probabilities on a grid; NaN marks uncovered cells.

    Cell (row, col) is centered at level-0 (origin_x + col * stride, origin_y + row * stride).
    """

    values: np.ndarray
    stride: int
    origin: tuple[int, int]

    def cell_center(self, row: int, col: int) -> tuple[int, int]:
        return self.origin[0] + col * self.stride, self.origin[1] + row * self.stride

    def cell_of(self, x: int, y: int) -> tuple[int, int]:
        dx, dy = x - self.origin[0], y - self.origin[1]
        if dx < 0 or dy < 0 or dx % self.stride or dy % self.stride:
            raise ArgumentError(f"Coordinate ({x}, {y}) is off the heatmap grid")
        return dy // self.stride, dx // self.stride

    @property
    def covered(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def geometry(self) -> dict:
        return {"stride": self.stride, "origin": list(self.origin), "shape": list(self.values.shape)}


def build_heatmap(
    predictions: Sequence[float],
    coordinates: Sequence[tuple[int, int]],
    stride: int,
    origin: tuple[int, int] = (0, 0),
    shape: Optional[tuple[int, int]] = None,
) -> Heatmap:
    """Place patch predictions at the grid cells of their level-0 centers."""
    probs = np.asarray(predictions, dtype=np.float64)
    if len(probs) != len(coordinates):
        raise ArgumentError("Predictions and coordinates differ in length")
    if stride <= 0:
        raise ArgumentError("Heatmap stride must be positive")
    if len(probs) and (not np.isfinite(probs).all() or probs.min() < 0 or probs.max() > 1):
        raise ArgumentError("Heatmap predictions must lie in [0, 1]")
    heatmap = Heatmap(np.empty((0, 0)), stride, origin)
    cells = [heatmap.cell_of(int(x), int(y)) for x, y in coordinates]
    if shape is None:
        shape = (max((r for r, _ in cells), default=-1) + 1, max((c for _, c in cells), default=-1) + 1)
    values = np.full(shape, np.nan)
    for (row, col), p in zip(cells, probs):
        if row >= shape[0] or col >= shape[1]:
            raise ArgumentError(f"Cell ({row}, {col}) lies outside a {shape} heatmap")
        if not np.isnan(values[row, col]):
            logger.warning("[metrics] duplicate heatmap cell (%d, %d); keeping the last prediction", row, col)
        values[row, col] = p
    heatmap.values = values
    return heatmap


def slide_features(heatmap: Heatmap) -> np.ndarray:
    """Fixed seven-value descriptor, in the order of SLIDE_FEATURE_NAMES."""
    covered = heatmap.covered
    if heatmap.values.size == 0 or not covered.any():
        raise UndefinedMetricError("Slide features need a non-empty heatmap")
    probs = heatmap.values[covered]
    mask = np.where(covered, heatmap.values, 0.0) >= 0.5
    components, count = ndimage.label(mask)
    if count:
        areas = np.bincount(components.ravel())[1:]
        largest = int(np.argmax(areas)) + 1
        largest_area = float(areas[largest - 1])
        largest_mean = float(heatmap.values[components == largest].mean())
    else:
        largest_area, largest_mean = 0.0, 0.0
    return np.array(
        [
            probs.max(),
            probs.mean(),
            np.mean(probs >= 0.5),
            np.mean(probs >= 0.9),
            largest_area,
            float(count),
            largest_mean,
        ],
        dtype=np.float64,
    )


def train_slide_classifier(features: np.ndarray, labels: Sequence[int], c: float = 1.0) -> Pipeline:
    """Standardized linear max-margin classifier on slide features."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ArgumentError("Expected (n_slides, n_features) features aligned with labels")
    if len(np.unique(y)) < 2:
        raise UndefinedMetricError("Slide classifier needs both normal and tumor slides")
    classifier = make_pipeline(StandardScaler(), LinearSVC(C=c, random_state=0))
    classifier.fit(x, y)
    return classifier


def predict_slide(classifier: Pipeline, features: np.ndarray) -> np.ndarray:
    """Tumor probability per slide from the logistic squashing of the margin."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return expit(classifier.decision_function(x))


def export_heatmap(heatmap: Heatmap, path: Path, title: Optional[str] = None) -> Path:
    """Write a colormapped PNG and a JSON geometry sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 4))
    image = ax.imshow(np.ma.masked_invalid(heatmap.values), cmap="jet", vmin=0.0, vmax=1.0)
    fig.colorbar(image, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    ax.set_axis_off()
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    path.with_suffix(".json").write_text(json.dumps(heatmap.geometry(), sort_keys=True))
    return path


###################
# Reports
###################
class MetricReport(BaseModel):
    """Structured per-run evaluation summary."""

    run_id: str
    task: str
    metrics: dict[str, float] = Field(default_factory=dict)
    intervals: dict[str, tuple[float, float]] = Field(default_factory=dict)
    variant: Optional[str] = Field(default=None, description="ICC form used")
    slide_features_version: Optional[int] = None
    flags: list[str] = Field(default_factory=list)

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True))
        return path


def regression_report(
    run_id: str, preds: np.ndarray, truth: np.ndarray, raters: Optional[np.ndarray], confidence: float = 0.95
) -> MetricReport:
    """MSE against ground truth and ICC of the model against ground truth and each rater."""
    preds, truth = np.asarray(preds, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    report = MetricReport(run_id=run_id, task="regression", variant=ICC_VARIANT)
    report.metrics["mse"] = float(np.mean((preds - truth) ** 2))
    references = {"truth": truth}
    if raters is not None:
        for i in range(raters.shape[1]):
            references[f"rater{i + 1}"] = raters[:, i]
    for name, reference in references.items():
        result = icc(np.column_stack([preds, reference]), confidence)
        report.metrics[f"icc_{name}"] = result.coefficient
        report.intervals[f"icc_{name}"] = (result.low, result.high)
        if result.degenerate:
            report.flags.append(f"icc_{name}_degenerate")
    return report


def classification_report(
    run_id: str, probs: np.ndarray, labels: np.ndarray, confidence: float = 0.95
) -> MetricReport:
    """Accuracy, weighted F1 and AUC (binary DeLong or macro one-vs-rest) of patch predictions."""
    probs, labels = np.asarray(probs), np.asarray(labels)
    preds = probs.argmax(axis=1)
    report = MetricReport(run_id=run_id, task="classification")
    report.metrics["accuracy"] = accuracy(preds, labels)
    report.metrics["weighted_f1"] = weighted_f1(preds, labels)
    try:
        if probs.shape[1] == 2:
            result = auc_delong(probs[:, 1], labels, confidence)
            report.metrics["auc"] = result.auc
            report.intervals["auc"] = (result.low, result.high)
        else:
            report.metrics["macro_auc"] = macro_auc_ovr(probs, labels)
    except UndefinedMetricError as e:
        report.flags.append(f"auc_undefined: {e}")
    return report
