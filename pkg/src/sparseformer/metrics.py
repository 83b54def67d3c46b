"""Evaluation metrics with brute-force-verifiable definitions.

Classification metrics (accuracy, macro precision/recall/F1) are plain
confusion-matrix arithmetic with 0/0 defined as 0; macro averages run over
all M classes, including ones absent from the evaluated split.  Ranking
metrics (AUROC, AUPRC) are one-vs-rest per class on the similarity logits;
classes without both a positive and a negative are excluded from the macro
mean, and if every class is degenerate that is an error rather than a
number.  AUROC uses the rank-sum formulation with midrank ties; AUPRC is
step (non-interpolated) average precision with ties broken by stable input
order.  Each of these equals an O(N^2) brute-force enumeration, which the
tests run against random instances.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from sparseformer.errors import MetricError


@dataclass(frozen=True)
class ClassScores:
    """One class's row of the per-class breakdown table."""
    id: int
    precision: float
    recall: float
    f1: float
    auroc: float  # None when the class has no positives or no negatives
    auprc: float
    support: int


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    auroc_macro: float
    auprc_macro: float
    per_class: tuple

    def summary(self):
        return {"accuracy": self.accuracy,
                "precision_macro": self.precision_macro,
                "recall_macro": self.recall_macro,
                "f1_macro": self.f1_macro,
                "auroc_macro": self.auroc_macro,
                "auprc_macro": self.auprc_macro}

    def report_lines(self, prefix=""):
        """key=value lines; degenerate per-class ranking entries are omitted."""
        lines = [f"{prefix}{k}={v!r}" for k, v in self.summary().items()]
        for row in self.per_class:
            base = f"{prefix}class_{row.id}_"
            lines.append(f"{base}precision={row.precision!r}")
            lines.append(f"{base}recall={row.recall!r}")
            lines.append(f"{base}f1={row.f1!r}")
            if row.auroc is not None:
                lines.append(f"{base}auroc={row.auroc!r}")
            if row.auprc is not None:
                lines.append(f"{base}auprc={row.auprc!r}")
            lines.append(f"{base}support={row.support}")
        return lines


def _check_ids(ids, num_classes, what):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or len(ids) == 0:
        raise MetricError(f"{what} must be a non-empty 1-D id vector")
    if ids.min() < 1 or ids.max() > num_classes:
        bad = ids[(ids < 1) | (ids > num_classes)][0]
        raise MetricError(f"{what} id {int(bad)} outside 1..{num_classes}")
    return ids


def classification_metrics(true_ids, pred_ids, num_classes):
    """Accuracy plus per-class and macro precision/recall/F1.

    Returns (accuracy, precision[M], recall[M], f1[M]) with the macro
    values being plain means of the per-class arrays.
    """
    true_ids = _check_ids(true_ids, num_classes, "true")
    pred_ids = _check_ids(pred_ids, num_classes, "predicted")
    if len(true_ids) != len(pred_ids):
        raise MetricError(f"{len(true_ids)} true vs {len(pred_ids)} predicted")
    accuracy = float((true_ids == pred_ids).mean())
    precision = np.zeros(num_classes)
    recall = np.zeros(num_classes)
    f1 = np.zeros(num_classes)
    for k in range(num_classes):
        cid = k + 1
        tp = int(((true_ids == cid) & (pred_ids == cid)).sum())
        fp = int(((true_ids != cid) & (pred_ids == cid)).sum())
        fn = int(((true_ids == cid) & (pred_ids != cid)).sum())
        precision[k] = tp / (tp + fp) if tp + fp else 0.0
        recall[k] = tp / (tp + fn) if tp + fn else 0.0
        denom = precision[k] + recall[k]
        f1[k] = 2.0 * precision[k] * recall[k] / denom if denom else 0.0
    return accuracy, precision, recall, f1


def _check_scores(true_ids, scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise MetricError(f"scores must be [N, M], got {scores.shape}")
    true_ids = _check_ids(true_ids, scores.shape[1], "true")
    if len(true_ids) != scores.shape[0]:
        raise MetricError(f"{len(true_ids)} ids vs {scores.shape[0]} score rows")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores contain non-finite values")
    return true_ids, scores


def _binary_auroc(positive, column):
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(column)  # midranks for ties
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _binary_auprc(positive, column):
    n_pos = int(positive.sum())
    if n_pos == 0 or n_pos == len(positive):
        return None
    order = np.argsort(-column, kind="stable")
    hits = positive[order]
    cum_tp = np.cumsum(hits)
    ranks = np.arange(1, len(column) + 1)
    return float((cum_tp[hits] / ranks[hits]).sum() / n_pos)


def _macro(per_class, what):
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise MetricError(f"{what} undefined: every class lacks positives "
                          "or negatives")
    return float(np.mean(defined))


def auroc_per_class(true_ids, scores):
    """One-vs-rest AUROC per class; None where degenerate."""
    true_ids, scores = _check_scores(true_ids, scores)
    return [_binary_auroc(true_ids == k + 1, scores[:, k])
            for k in range(scores.shape[1])]


def auprc_per_class(true_ids, scores):
    """One-vs-rest average precision per class; None where degenerate."""
    true_ids, scores = _check_scores(true_ids, scores)
    return [_binary_auprc(true_ids == k + 1, scores[:, k])
            for k in range(scores.shape[1])]


def auroc_macro(true_ids, scores):
    return _macro(auroc_per_class(true_ids, scores), "auroc")


def auprc_macro(true_ids, scores):
    return _macro(auprc_per_class(true_ids, scores), "auprc")


def evaluate_scores(true_ids, scores):
    """Full EvalResult from similarity logits.

    Predictions are the per-row argmax with ties resolved to the lowest
    class id — the same rule the label module's predict uses.
    """
    true_ids, scores = _check_scores(true_ids, scores)
    num_classes = scores.shape[1]
    pred_ids = np.argmax(scores, axis=1) + 1
    accuracy, precision, recall, f1 = classification_metrics(
        true_ids, pred_ids, num_classes)
    aurocs = [_binary_auroc(true_ids == k + 1, scores[:, k])
              for k in range(num_classes)]
    auprcs = [_binary_auprc(true_ids == k + 1, scores[:, k])
              for k in range(num_classes)]
    rows = tuple(ClassScores(id=k + 1, precision=float(precision[k]),
                             recall=float(recall[k]), f1=float(f1[k]),
                             auroc=aurocs[k], auprc=auprcs[k],
                             support=int((true_ids == k + 1).sum()))
                 for k in range(num_classes))
    return EvalResult(accuracy=accuracy,
                      precision_macro=float(precision.mean()),
                      recall_macro=float(recall.mean()),
                      f1_macro=float(f1.mean()),
                      auroc_macro=_macro(aurocs, "auroc"),
                      auprc_macro=_macro(auprcs, "auprc"),
                      per_class=rows)
