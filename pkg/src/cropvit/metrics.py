"""Evaluation metrics: balanced accuracy, one-vs-rest AP/mAP, box IoU,
detection AP/AP50, counting errors (MAE/RMSE/R^2), segmentation
mIoU/mAcc, plus the line-oriented prediction/ground-truth interchange
formats.

All functions are pure and permutation-invariant over sample order. Score
ties rank by input index. Classes that cannot be scored (absent from the
ground truth, zero positives, zero variance) are excluded from means and
listed in the result's ``excluded``/``notes`` fields instead of silently
defining 0/0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError

DETECTION_IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


@dataclass
class MetricReport:
    task: str
    scalars: dict[str, float]
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "scalars": self.scalars,
                           "per_class": self.per_class, "notes": self.notes},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        obj = json.loads(text)
        return cls(task=obj["task"], scalars=obj["scalars"],
                   per_class=obj.get("per_class", {}), notes=obj.get("notes", []))


# -- classification -----------------------------------------------------------


def balanced_accuracy(labels: Sequence[int], predictions: Sequence[int]
                      ) -> tuple[float, list[int]]:
    """Mean per-class recall. Returns (value, excluded_classes); classes
    never seen in the ground truth are excluded from the mean."""
    labels = np.asarray(labels, dtype=int)
    predictions = np.asarray(predictions, dtype=int)
    if labels.shape != predictions.shape or labels.size == 0:
        raise InputError("labels and predictions must be equal-length, nonempty")
    classes = np.unique(np.concatenate([labels, predictions]))
    recalls, excluded = [], []
    for c in classes:
        in_gt = labels == c
        if not in_gt.any():
            excluded.append(int(c))
            continue
        recalls.append((predictions[in_gt] == c).mean())
    return float(np.mean(recalls)), excluded


def _ranked_order(scores: np.ndarray) -> np.ndarray:
    """Descending score; ties broken by input index (stable)."""
    return np.argsort(-scores, kind="stable")


def average_precision(scores: Sequence[float], positives: Sequence[bool]
                      ) -> float | None:
    """All-point interpolated AP of a ranked list (precision envelope).

    None when there are no positives.
    """
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        return None
    order = _ranked_order(scores)
    flags = positives[order]
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1)
    # envelope: running max of precision from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    # sum envelope precision at each new recall level
    return float(env[flags].sum() / n_pos)


def classification_map(scores: np.ndarray, labels: Sequence[int]
                       ) -> tuple[float, dict[int, float], list[int]]:
    """One-vs-rest AP per class and their mean.

    Returns (mAP, {class: AP}, excluded classes with zero positives).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise InputError("scores must be (n_samples, n_classes) matched to labels")
    ap, excluded = {}, []
    for c in range(scores.shape[1]):
        val = average_precision(scores[:, c], labels == c)
        if val is None:
            excluded.append(c)
        else:
            ap[c] = val
    if not ap:
        raise InputError("no class has positives; mAP undefined")
    return float(np.mean(list(ap.values()))), ap, excluded


# -- boxes ----------------------------------------------------------------------


def iou_box(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes; degenerate
    boxes give 0."""
    ax0, ay0, ax1, ay1 = a[:4]
    bx0, by0, bx1, by1 = b[:4]
    area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
    area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
    if area_a == 0.0 or area_b == 0.0:
        return 0.0
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    return inter / (area_a + area_b - inter)


def match_detections(pred_boxes: np.ndarray, pred_scores: np.ndarray,
                     pred_images: np.ndarray, gt_boxes: np.ndarray,
                     gt_images: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy matching in descending score order; each ground truth is
    matched at most once. Returns a TP flag per prediction (input order)."""
    flags = np.zeros(len(pred_scores), dtype=bool)
    taken: set[tuple[int, int]] = set()
    for i in _ranked_order(pred_scores):
        img = pred_images[i]
        best_iou, best_j = 0.0, -1
        for j in np.nonzero(gt_images == img)[0]:
            if (img, j) in taken:
                continue
            v = iou_box(pred_boxes[i], gt_boxes[j])
            if v > best_iou:
                best_iou, best_j = v, int(j)
        if best_j >= 0 and best_iou >= iou_threshold:
            flags[i] = True
            taken.add((img, best_j))
    return flags


def detection_ap(predictions: Sequence[tuple], ground_truth: Sequence[tuple],
                 thresholds: Sequence[float] = DETECTION_IOU_THRESHOLDS
                 ) -> tuple[float, float, dict[float, float], list[str]]:
    """AP averaged over IoU thresholds 0.50:0.05:0.95, plus AP50.

    predictions: (image_id, score, x0, y0, x1, y1) tuples;
    ground_truth: (image_id, x0, y0, x1, y1) tuples.
    Returns (AP, AP50, per-threshold APs, notes). Zero ground truth is the
    convention result 1.0 and is reported in notes.
    """
    notes: list[str] = []
    if len(ground_truth) == 0:
        notes.append("zero ground-truth boxes: AP = 1.0 by convention")
        per = {float(t): 1.0 for t in thresholds}
        return 1.0, 1.0, per, notes
    p_img = np.array([p[0] for p in predictions], dtype=int)
    p_score = np.array([p[1] for p in predictions], dtype=float)
    p_box = np.array([p[2:6] for p in predictions], dtype=float).reshape(-1, 4)
    g_img = np.array([g[0] for g in ground_truth], dtype=int)
    g_box = np.array([g[1:5] for g in ground_truth], dtype=float).reshape(-1, 4)
    n_pos = len(ground_truth)
    per: dict[float, float] = {}
    for t in thresholds:
        if len(predictions) == 0:
            per[float(t)] = 0.0
            continue
        flags = match_detections(p_box, p_score, p_img, g_box, g_img, float(t))
        order = _ranked_order(p_score)
        ranked = flags[order]
        tp = np.cumsum(ranked)
        precision = tp / np.arange(1, len(ranked) + 1)
        env = np.maximum.accumulate(precision[::-1])[::-1]
        per[float(t)] = float(env[ranked].sum() / n_pos)
    ap = float(np.mean(list(per.values())))
    ap50 = per.get(0.5, float("nan"))
    return ap, ap50, per, notes


# -- counting ---------------------------------------------------------------------


def counting_errors(y: Sequence[float], y_hat: Sequence[float]
                    ) -> tuple[float, float, float | None]:
    """(MAE, RMSE, R^2); R^2 is None when the targets are constant."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size == 0:
        raise InputError("count vectors must be equal-length and nonempty")
    err = y - y_hat
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err * err).mean()))
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return mae, rmse, None
    r2 = 1.0 - float((err * err).sum()) / ss_tot
    return mae, rmse, r2


# -- segmentation -------------------------------------------------------------------


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    gt = np.asarray(gt).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    if gt.shape != pred.shape:
        raise InputError("label maps must share extents")
    if gt.min() < 0 or gt.max() >= num_classes or pred.min() < 0 or pred.max() >= num_classes:
        raise InputError(f"labels must lie in [0, {num_classes})")
    idx = gt * num_classes + pred
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def seg_miou_macc(gt: np.ndarray, pred: np.ndarray, num_classes: int,
                  macc_with_tn: bool = False):
    """Per-class IoU and accuracy with their means.

    Acc_i defaults to per-class recall TP/(TP+FN); ``macc_with_tn`` selects
    the (TP+TN)/(TP+TN+FP+FN) variant. Classes absent from both maps are
    excluded and reported. Returns (per_iou, miou, per_acc, macc, excluded).
    """
    cm = confusion_matrix(gt, pred, num_classes)
    total = cm.sum()
    per_iou: dict[int, float] = {}
    per_acc: dict[int, float] = {}
    excluded: list[int] = []
    for c in range(num_classes):
        tp = cm[c, c]
        fn = cm[c, :].sum() - tp
        fp = cm[:, c].sum() - tp
        tn = total - tp - fn - fp
        if tp + fn + fp == 0:
            excluded.append(c)
            continue
        per_iou[c] = float(tp / (tp + fp + fn))
        if macc_with_tn:
            per_acc[c] = float((tp + tn) / total)
        elif tp + fn > 0:
            per_acc[c] = float(tp / (tp + fn))
        # recall undefined for classes with no ground-truth pixels: the
        # class stays in the IoU mean but not the accuracy mean
    miou = float(np.mean(list(per_iou.values()))) if per_iou else 0.0
    macc = float(np.mean(list(per_acc.values()))) if per_acc else 0.0
    return per_iou, miou, per_acc, macc, excluded


# -- interchange files ----------------------------------------------------------------


def write_classification_file(path: str, ids: Sequence, scores: np.ndarray,
                              labels: Sequence[int]) -> None:
    """One line per sample: id, per-class scores, ground-truth label."""
    scores = np.asarray(scores, dtype=float)
    with open(path, "w") as f:
        for i, sid in enumerate(ids):
            cells = " ".join(f"{v:.17g}" for v in scores[i])
            f.write(f"{sid} {cells} {int(labels[i])}\n")


def read_classification_file(path: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    ids, rows, labels = [], [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if len(parts) < 3:
                raise InputError(f"{path}:{ln}: need id, scores..., label")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:-1]])
            labels.append(int(parts[-1]))
    return ids, np.array(rows), np.array(labels, dtype=int)


def write_detection_file(path: str, rows: Sequence[tuple], with_score: bool) -> None:
    """Predictions: image_id class score x0 y0 x1 y1; ground truth drops
    the score column."""
    want = 7 if with_score else 6
    with open(path, "w") as f:
        for row in rows:
            if len(row) != want:
                raise InputError(f"detection row needs {want} fields, got {len(row)}")
            f.write(" ".join(f"{v:.17g}" if isinstance(v, float) else str(v)
                             for v in row) + "\n")


def read_detection_file(path: str, with_score: bool) -> list[tuple]:
    out = []
    want = 7 if with_score else 6
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if len(parts) != want:
                raise InputError(f"{path}:{ln}: expected {want} fields")
            if with_score:
                out.append((int(parts[0]), int(parts[1]), float(parts[2]),
                            *map(float, parts[3:])))
            else:
                out.append((int(parts[0]), int(parts[1]), *map(float, parts[2:])))
    return out


def write_counting_file(path: str, rows: Sequence[tuple]) -> None:
    """One line per image: image_id count."""
    with open(path, "w") as f:
        for img_id, count in rows:
            f.write(f"{img_id} {count:.17g}\n")


def read_counting_file(path: str) -> dict[int, float]:
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if len(parts) != 2:
                raise InputError(f"{path}:{ln}: expected image_id count")
            out[int(parts[0])] = float(parts[1])
    return out


def save_label_map(path: str, labels: np.ndarray) -> None:
    """8-bit single-channel PNG."""
    from PIL import Image

    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise InputError("label maps must fit in uint8")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def load_label_map(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=int)


def format_mean_std(values: Sequence[float]) -> str:
    """Aggregated-report convention: mean to one decimal, (± std) to two."""
    arr = np.asarray(values, dtype=float)
    return f"{arr.mean():.1f} (± {arr.std(ddof=0):.2f})"
