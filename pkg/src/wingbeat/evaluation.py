"""Trial evaluation: per-class accuracy, confusion matrices, ROC/AUC with
macro-averaging, permutation p-values, and summary reports.

Per-class "detection accuracy" is recall on the balanced test set. One-vs-rest
scores are gate-consistent: a species' score is its stage-2 vote count, with
stage-1 negatives ranked below everything; the background score is the negated
stage-1 decision value. The p-value is a label-permutation test on the mean of
the per-class rank-based (Mann-Whitney) AUCs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import pipeline
from .errors import ConfigError

FPR_GRID_STEP = 0.001

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple
    counts: np.ndarray  # rows = truth, columns = prediction

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass(frozen=True)
class TrialResult:
    trial_seed: int
    per_class_accuracy: dict
    confusion: ConfusionMatrix
    macro_auc: float
    p_value: float


@dataclass(frozen=True)
class SummaryStats:
    classes: tuple
    n_trials: int
    mean: dict
    sd: dict
    min: dict
    max: dict


def roc_curve(scores, truths):
    """Threshold-sweep ROC over all distinct scores; starts at (0, 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    n_pos = int(truths.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_truth = truths[order]
    sorted_scores = scores[order]
    # indices where a threshold boundary falls (last of each tie group);
    # equality comparison, not diff: diff of tied infinities is nan
    boundary = np.flatnonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))
    tps = np.cumsum(sorted_truth)[boundary]
    fps = boundary + 1 - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    return fpr, tpr


def auc(fpr, tpr) -> float:
    """Trapezoidal area under an ROC curve."""
    return float(_trapezoid(tpr, fpr))


def mann_whitney_auc(scores, truths) -> float:
    """Tie-adjusted rank statistic; equals the trapezoidal ROC area."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    n_pos = int(truths.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[truths].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _upper_envelope(fpr, tpr):
    """Collapse vertical ROC segments so FPR is strictly increasing."""
    keep_fpr, keep_tpr = [], []
    for f, t in zip(fpr, tpr):
        if keep_fpr and f == keep_fpr[-1]:
            keep_tpr[-1] = max(keep_tpr[-1], t)
        else:
            keep_fpr.append(f)
            keep_tpr.append(t)
    return np.array(keep_fpr), np.array(keep_tpr)


def macro_average_roc(curves):
    """Average per-class curves on a common FPR grid (step 0.001).

    Returns (grid, mean_tpr, macro_auc).
    """
    if len(curves) < 2:
        raise ValueError("macro average needs at least two class curves")
    grid = np.linspace(0.0, 1.0, int(round(1.0 / FPR_GRID_STEP)) + 1)
    stack = []
    for fpr, tpr in curves:
        f, t = _upper_envelope(fpr, tpr)
        stack.append(np.interp(grid, f, t))
    mean_tpr = np.mean(stack, axis=0)
    return grid, mean_tpr, float(_trapezoid(mean_tpr, grid))


def auc_p_value(scores, truths, n_permutations: int = 1000, seed: int = 0) -> float:
    """Label-permutation p-value for a binary AUC."""
    if n_permutations < 1:
        raise ConfigError("n_permutations must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    observed = mann_whitney_auc(scores, truths)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_permutations):
        permuted = truths[rng.permutation(len(truths))]
        if mann_whitney_auc(scores, permuted) >= observed - 1e-12:
            hits += 1
    return (1 + hits) / (1 + n_permutations)


def macro_auc_p_value(score_columns, truth_labels, classes,
                      n_permutations: int = 1000, seed: int = 0) -> float:
    """Permutation p-value for the mean of per-class one-vs-rest AUCs."""
    if n_permutations < 1:
        raise ConfigError("n_permutations must be >= 1")
    score_columns = np.asarray(score_columns, dtype=np.float64)
    labels = np.asarray(truth_labels, dtype=object)
    n = len(labels)
    ranks = np.stack([rankdata(score_columns[:, k]) for k in range(len(classes))])

    def statistic(lab):
        total = 0.0
        for k, cls in enumerate(classes):
            pos = lab == cls
            n_pos = int(pos.sum())
            n_neg = n - n_pos
            total += (ranks[k][pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
        return total / len(classes)

    observed = statistic(labels)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_permutations):
        if statistic(labels[rng.permutation(n)]) >= observed - 1e-12:
            hits += 1
    return (1 + hits) / (1 + n_permutations)


def detection_scores(model: pipeline.TwoStageModel, detections) -> tuple:
    """One-vs-rest score columns per class: (classes, (n, K) matrix).

    Background uses the negated stage-1 value. A species uses its stage-2
    vote count where the gate opened and -inf (ranked last) where it did not.
    """
    classes = (model.background_label, *model.species_list)
    scores = np.full((len(detections), len(classes)), -np.inf)
    for row, det in enumerate(detections):
        scores[row, 0] = -det.stage1_score
        if det.mosquito_present:
            for k, species in enumerate(model.species_list, start=1):
                scores[row, k] = det.stage2_votes.get(species, 0)
    return classes, scores


def evaluate_trial(model: pipeline.TwoStageModel, test_samples,
                   n_permutations: int = 1000, seed: int = 0) -> TrialResult:
    """Classify the held-out samples and compute every per-trial statistic."""
    if not test_samples:
        raise ValueError("test set is empty")
    features = np.array([s.feature for s in test_samples])
    truths = np.array([s.class_label for s in test_samples], dtype=object)
    classes = (model.background_label, *model.species_list)
    for cls in classes:
        if not np.any(truths == cls):
            raise ValueError(f"class {cls!r} missing from the test set")
    detections = pipeline.classify_batch(model, features)
    predictions = np.array(
        [d.species if d.mosquito_present else model.background_label for d in detections],
        dtype=object,
    )
    index = {c: k for k, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=int)
    for truth, pred in zip(truths, predictions):
        counts[index[truth], index[pred]] += 1
    per_class = {
        cls: float((predictions[truths == cls] == cls).mean()) for cls in classes
    }
    _, score_columns = detection_scores(model, detections)
    curves = [roc_curve(score_columns[:, k], truths == cls) for k, cls in enumerate(classes)]
    _, _, macro = macro_average_roc(curves)
    p = macro_auc_p_value(score_columns, truths, classes, n_permutations, seed)
    return TrialResult(
        trial_seed=seed,
        per_class_accuracy=per_class,
        confusion=ConfusionMatrix(classes=classes, counts=counts),
        macro_auc=macro,
        p_value=p,
    )


def summarize_trials(results) -> SummaryStats:
    """Per-class mean / population SD / min / max of accuracy over trials."""
    if not results:
        raise ValueError("need at least one trial result")
    classes = results[0].confusion.classes
    table = {cls: np.array([r.per_class_accuracy[cls] for r in results]) for cls in classes}
    return SummaryStats(
        classes=classes,
        n_trials=len(results),
        mean={c: float(v.mean()) for c, v in table.items()},
        sd={c: float(v.std()) for c, v in table.items()},
        min={c: float(v.min()) for c, v in table.items()},
        max={c: float(v.max()) for c, v in table.items()},
    )


STAT_ROWS = (("Mean", "mean"), ("SD", "sd"), ("Min.", "min"), ("Max.", "max"))


def render_text_table(stats: SummaryStats) -> str:
    """Accuracy statistics with one column per class and the four
    Mean / SD / Min. / Max. rows."""
    width = max(10, *(len(str(c)) + 2 for c in stats.classes))
    header = "Accuracy".ljust(10) + "".join(str(c).rjust(width) for c in stats.classes)
    lines = [header]
    for row_label, attr in STAT_ROWS:
        values = getattr(stats, attr)
        lines.append(
            row_label.ljust(10)
            + "".join(f"{values[c]:.4f}".rjust(width) for c in stats.classes)
        )
    return "\n".join(lines) + "\n"


def render_csv(stats: SummaryStats) -> str:
    lines = ["class,statistic,value"]
    for cls in stats.classes:
        for row_label, attr in STAT_ROWS:
            lines.append(f"{cls},{row_label},{getattr(stats, attr)[cls]!r}")
    return "\n".join(lines) + "\n"


def stats_to_json(stats: SummaryStats) -> str:
    doc = {
        "n_trials": stats.n_trials,
        "classes": list(stats.classes),
        "per_class": {
            str(cls): {
                "mean": stats.mean[cls],
                "sd": stats.sd[cls],
                "min": stats.min[cls],
                "max": stats.max[cls],
            }
            for cls in stats.classes
        },
        "row_labels": [label for label, _ in STAT_ROWS],
    }
    return json.dumps(doc, indent=2) + "\n"


def trial_to_json_line(result: TrialResult) -> str:
    return json.dumps({
        "trial_seed": result.trial_seed,
        "per_class_accuracy": {str(k): v for k, v in result.per_class_accuracy.items()},
        "macro_auc": result.macro_auc,
        "p_value": result.p_value,
    })
