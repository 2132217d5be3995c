"""Depth and instance-mask evaluation metrics.

Depth follows the standard monocular protocol: RMSE, absolute relative
error, mean log10 error, and the delta accuracies with strict-inequality
thresholds 1.25^i, all restricted to valid pixels.

Mask quality is summarized two ways: mean IoU of greedily matched pairs and
a simplified average precision, Jaccard-style TP / (TP + FP + FN) averaged
over IoU thresholds 0.50 to 0.95 in steps of 0.05. Matching is greedy by
descending IoU within each class; predictions carry no calibrated scores in
this framework, so there is no score-ranked PR curve. Conventions: both
sides empty scores 1.0, predictions against an empty ground truth score 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    rel: float
    log10: float
    delta1: float
    delta2: float
    delta3: float

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MaskMetrics:
    mean_iou: float
    ap: float

    def to_dict(self):
        return asdict(self)


def depth_metrics(pred, gt, valid=None) -> DepthMetrics:
    """Standard depth errors over valid pixels; gt must be positive there."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} shapes differ")
    if valid is None:
        valid = np.ones_like(gt, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    p, g = pred[valid], gt[valid]
    if np.any(g <= 0):
        raise ValueError("ground-truth depth must be positive on valid pixels")
    p = np.maximum(p, 1e-8)  # guard log/ratio against degenerate predictions
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rel=float(np.mean(np.abs(p - g) / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _greedy_match(ious, threshold):
    """Pairs (pred, gt) by descending IoU, each side used once.

    Ties break toward lower indices so matching is deterministic.
    """
    n_p, n_g = ious.shape
    order = sorted(
        ((i, j) for i in range(n_p) for j in range(n_g)),
        key=lambda ij: (-ious[ij], ij[0], ij[1]),
    )
    used_p, used_g, pairs = set(), set(), []
    for i, j in order:
        if ious[i, j] < threshold:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return pairs


def mask_metrics(pred_instances, gt_instances, iou_thresholds=IOU_THRESHOLDS) -> MaskMetrics:
    """Greedy per-class matching; instances are (class_id, mask) pairs.

    ``mean_iou`` sums matched IoUs at the lowest threshold and divides by
    TP + FP + FN there, so spurious and missed instances drag it down.
    """
    preds = [(int(c), np.asarray(m, dtype=bool)) for c, m in pred_instances]
    gts = [(int(c), np.asarray(m, dtype=bool)) for c, m in gt_instances]
    if not preds and not gts:
        return MaskMetrics(mean_iou=1.0, ap=1.0)

    classes = sorted({c for c, _ in preds} | {c for c, _ in gts})
    by_class = {}
    for cls in classes:
        p = [m for c, m in preds if c == cls]
        g = [m for c, m in gts if c == cls]
        ious = np.zeros((len(p), len(g)))
        for i, pm in enumerate(p):
            for j, gm in enumerate(g):
                ious[i, j] = mask_iou(pm, gm)
        by_class[cls] = (len(p), len(g), ious)

    aps = []
    mean_iou = 0.0
    for t_i, threshold in enumerate(sorted(iou_thresholds)):
        tp = fp = fn = 0
        iou_sum = 0.0
        for n_p, n_g, ious in by_class.values():
            pairs = _greedy_match(ious, threshold)
            tp += len(pairs)
            fp += n_p - len(pairs)
            fn += n_g - len(pairs)
            iou_sum += sum(ious[ij] for ij in pairs)
        denom = tp + fp + fn
        aps.append(tp / denom if denom else 1.0)
        if t_i == 0:
            mean_iou = iou_sum / denom if denom else 1.0
    return MaskMetrics(mean_iou=float(mean_iou), ap=float(np.mean(aps)))
