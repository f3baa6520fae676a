"""Evaluation metrics: ROC-AUC (rank form with tie credit) and dice overlap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .hierpool import SlideBag, instance_saliency


class UndefinedMetricError(ValueError):
    """Metric has no value on this input (e.g. single-class AUC)."""


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average of their rank range."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0])
    i = 0
    while i < scores.shape[0]:
        j = i
        while j + 1 < scores.shape[0] and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Binary ROC-AUC via the rank (Mann-Whitney) statistic; tied score
    pairs contribute half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0/1 indicators")
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both a positive and a negative example")
    ranks = _average_ranks(scores)
    u = float(ranks[labels == 1].sum()) - 0.5 * n_pos * (n_pos + 1)
    return u / (n_pos * n_neg)


def macro_auc(prob_matrix, labels, n_classes: int) -> float:
    """Macro one-vs-rest AUC for multi-class probabilities."""
    prob_matrix = np.asarray(prob_matrix, dtype=np.float64)
    labels = np.asarray(labels)
    if n_classes == 2:
        return auc(prob_matrix[:, 1], (labels == 1).astype(int))
    per_class = []
    for c in range(n_classes):
        per_class.append(auc(prob_matrix[:, c], (labels == c).astype(int)))
    return float(np.mean(per_class))


def dice(predicted, truth) -> float:
    """2|A n B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    predicted = np.asarray(predicted).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if predicted.shape != truth.shape:
        raise DataError(f"mask lengths differ: {predicted.shape} vs {truth.shape}")
    total = int(predicted.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((predicted & truth).sum()) / total


# ---------------------------------------------------------------------------
# model evaluation


@dataclass
class EvalResult:
    auc: float
    per_slide: list[dict]
    dice_mean: float | None = None
    dice_per_slide: list[dict] | None = None

    def to_dict(self) -> dict:
        out = {"auc": self.auc, "per_slide": self.per_slide}
        if self.dice_mean is not None:
            out["dice_mean"] = self.dice_mean
            out["dice_per_slide"] = self.dice_per_slide
        return out


def evaluate(model, bags: list[SlideBag], *, with_localization: bool = False,
             saliency_mode: str = "multiplicative", threshold: float = 0.5) -> EvalResult:
    """Deterministic metrics for a trained model on a bag set.

    AUC uses the positive-class probability for binary tasks and the
    macro one-vs-rest average otherwise. Dice (optional) compares
    thresholded saliency with the planted masks, over slides whose
    ground truth marks at least one instance; saliency is predicted
    positive strictly above the threshold, so an all-tied slide
    (saliency 0.5 everywhere) predicts nothing.
    """
    if not bags:
        raise DataError("cannot evaluate an empty bag set")
    bags = sorted(bags, key=lambda b: b.slide_id)
    n_classes = model.prompts.n_classes
    class_embs = model.class_embeddings()
    guidance = model.guidance(class_embs)
    probs, labels, per_slide = [], [], []
    dice_rows = []
    for bag in bags:
        p, out = model.bag_forward(bag, class_embs, guidance)
        probs.append(p)
        labels.append(bag.label)
        per_slide.append({
            "slide_id": bag.slide_id,
            "label": bag.label,
            "probabilities": [float(x) for x in p],
            "predicted": int(np.argmax(p)),
        })
        if with_localization and bag.has_mask():
            truth = bag.flat_mask()
            if truth.sum() > 0:
                sal = np.concatenate(instance_saliency(out, saliency_mode))
                d = dice(sal > threshold, truth)
                dice_rows.append({"slide_id": bag.slide_id, "dice": d,
                                  "n_truth": int(truth.sum()),
                                  "n_predicted": int((sal > threshold).sum())})
    score = macro_auc(np.stack(probs), np.asarray(labels), n_classes)
    result = EvalResult(auc=score, per_slide=per_slide)
    if with_localization and dice_rows:
        result.dice_mean = float(np.mean([r["dice"] for r in dice_rows]))
        result.dice_per_slide = dice_rows
    return result
