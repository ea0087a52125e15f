"""Threshold-independent detection metrics; label 1 marks the outlier class."""
from typing import List, Optional

import numpy as np
from scipy import ndimage
from sklearn.metrics import average_precision_score, roc_auc_score

from autood.errors import ContractError
from autood.models.records import MetricRow

RPRO_THRESHOLDS = 50


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ContractError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise ContractError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("labels must be binary")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise ContractError("both classes must be present")
    return scores, labels


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + ½·P(tie)."""
    scores, labels = _check(scores, labels)
    return float(roc_auc_score(labels, scores))


def aupr(scores, labels, positive_class: str = "out") -> float:
    """Average precision; tied scores share one threshold.

    ``positive_class="in"`` treats inliers as positives and ranks them by
    negated score.
    """
    scores, labels = _check(scores, labels)
    if positive_class == "in":
        scores, labels = -scores, ~labels
    elif positive_class != "out":
        raise ContractError(f"positive_class must be 'in' or 'out', got {positive_class!r}")
    return float(average_precision_score(labels, scores))


def region_overlap(predictions, truth_masks) -> float:
    """Mean over 4-connected truth regions of |prediction ∩ region| / |region|."""
    predictions = np.asarray(predictions).astype(bool)
    truth_masks = np.asarray(truth_masks).astype(bool)
    if predictions.shape != truth_masks.shape:
        raise ContractError(f"prediction shape {predictions.shape} != mask shape {truth_masks.shape}")
    if predictions.ndim == 2:
        predictions, truth_masks = predictions[None], truth_masks[None]
    overlaps = []
    for prediction, mask in zip(predictions, truth_masks):
        regions, count = ndimage.label(mask)
        for region in range(1, count + 1):
            inside = regions == region
            overlaps.append(prediction[inside].mean())
    if not overlaps:
        raise ContractError("truth masks contain no positive region")
    return float(np.mean(overlaps))


def rpro_thresholds(score_maps, n_thresholds: int = RPRO_THRESHOLDS) -> np.ndarray:
    if n_thresholds < 1:
        raise ContractError("n_thresholds must be >= 1")
    return np.quantile(np.asarray(score_maps, dtype=np.float64), np.linspace(0.0, 1.0, n_thresholds))


def rpro(score_maps, truth_masks, n_thresholds: int = RPRO_THRESHOLDS) -> float:
    """Relative per-region overlap averaged over evenly spaced score quantiles."""
    score_maps = np.asarray(score_maps, dtype=np.float64)
    truth_masks = np.asarray(truth_masks)
    if score_maps.shape != truth_masks.shape:
        raise ContractError(f"score map shape {score_maps.shape} != mask shape {truth_masks.shape}")
    if not truth_masks.any():
        raise ContractError("truth masks contain no positive region")
    thresholds = rpro_thresholds(score_maps, n_thresholds)
    return float(np.mean([region_overlap(score_maps >= t, truth_masks) for t in thresholds]))


def pixel_auroc(score_maps, masks) -> float:
    return auroc(np.asarray(score_maps).reshape(-1), np.asarray(masks).reshape(-1))


def reward(metric: str, scores, labels, score_maps=None, masks=None) -> float:
    if metric == "auroc":
        return auroc(scores, labels)
    if metric == "aupr":
        return aupr(scores, labels, positive_class="out")
    if metric == "rpro":
        if score_maps is None or masks is None:
            raise ContractError("rpro reward needs score maps and masks")
        return rpro(score_maps, masks)
    raise ContractError(f"unknown reward metric '{metric}'")


def metric_rows(scores, labels, score_maps: Optional[np.ndarray] = None,
                masks: Optional[np.ndarray] = None) -> List[MetricRow]:
    labels = np.asarray(labels).reshape(-1)
    n_pos, n_neg = int(labels.sum()), int(labels.size - labels.sum())
    rows = [
        MetricRow(metric="auroc", value=auroc(scores, labels), n_pos=n_pos, n_neg=n_neg),
        MetricRow(metric="aupr_in", value=aupr(scores, labels, "in"), n_pos=n_pos, n_neg=n_neg),
        MetricRow(metric="aupr_out", value=aupr(scores, labels, "out"), n_pos=n_pos, n_neg=n_neg),
    ]
    if score_maps is not None and masks is not None and np.asarray(masks).any():
        pixels = np.asarray(masks).reshape(-1)
        p_pos, p_neg = int(pixels.sum()), int(pixels.size - pixels.sum())
        rows.append(MetricRow(metric="pixel_auroc", value=pixel_auroc(score_maps, masks), n_pos=p_pos, n_neg=p_neg))
        rows.append(MetricRow(metric="rpro", value=rpro(score_maps, masks), n_pos=p_pos, n_neg=p_neg))
    return rows
