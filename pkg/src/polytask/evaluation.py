"""Metrics: COCO-style mean average precision and plain accuracy.

mAP protocol: per class and IoU threshold, predictions are ranked by score
(ties broken by input order), each greedily matched to the highest-IoU
not-yet-matched ground truth of its class in its image; AP uses 101-point
interpolated precision; mAP averages over classes that have at least one
ground truth and over thresholds 0.50:0.05:0.95.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from .matching import iou_pairwise

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def accuracy(predicted: Sequence[int], gold: Sequence[int]) -> float:
    predicted = np.asarray(predicted)
    gold = np.asarray(gold)
    if predicted.shape != gold.shape:
        raise ValueError(f"label list lengths differ: {predicted.shape} vs {gold.shape}")
    if predicted.size == 0:
        raise ValueError("cannot compute accuracy of empty label lists")
    return float((predicted == gold).mean())


def _class_ap(
    ranked: List[tuple], gts_per_image: Dict[int, np.ndarray], num_gt: int, threshold: float
) -> float:
    """AP for one class at one IoU threshold.

    ``ranked`` holds (image_id, box) in rank order; ``gts_per_image`` maps an
    image to its (M, 4) ground-truth boxes of this class.
    """
    if num_gt == 0 or not ranked:
        return 0.0
    matched = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts_per_image.items()}
    tp = np.zeros(len(ranked))
    for rank, (img, box) in enumerate(ranked):
        boxes = gts_per_image.get(img)
        if boxes is None or boxes.size == 0:
            continue
        ious = iou_pairwise(box[None, :], boxes)[0]
        ious = np.where(matched[img], -1.0, ious)
        j = int(ious.argmax())
        if ious[j] >= threshold:
            matched[img][j] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.arange(1, len(ranked) + 1)
    # right-to-left precision envelope, then sample at 101 recall points
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    sampled = np.where(idx < len(ranked), envelope[np.minimum(idx, len(ranked) - 1)], 0.0)
    return float(sampled.mean())


def mean_average_precision(
    predictions: Sequence[Sequence],
    ground_truths: Sequence[dict],
    iou_thresholds: Optional[Sequence[float]] = None,
) -> float:
    """predictions[i]: detections for image i (class_id, score, box attrs);
    ground_truths[i]: {'classes': (M,), 'boxes': (M, 4)}."""
    if len(predictions) != len(ground_truths):
        raise ValueError("prediction and ground-truth image counts differ")
    thresholds = COCO_THRESHOLDS if iou_thresholds is None else tuple(iou_thresholds)
    classes = sorted(
        {int(c) for gt in ground_truths for c in np.asarray(gt["classes"]).reshape(-1)}
    )
    if not classes:
        return 0.0
    ap_values = []
    for cls in classes:
        gts_per_image = {}
        num_gt = 0
        for img, gt in enumerate(ground_truths):
            sel = np.asarray(gt["classes"]) == cls
            if sel.any():
                gts_per_image[img] = np.asarray(gt["boxes"], dtype=np.float64)[sel]
                num_gt += int(sel.sum())
        entries = []  # (-score, input order, image, box)
        order = 0
        for img, dets in enumerate(predictions):
            for d in dets:
                if int(d.class_id) == cls:
                    entries.append((-float(d.score), order, img, np.asarray(d.box, dtype=np.float64)))
                order += 1
        entries.sort(key=lambda e: (e[0], e[1]))
        ranked = [(img, box) for _, _, img, box in entries]
        for thr in thresholds:
            ap_values.append(_class_ap(ranked, gts_per_image, num_gt, thr))
    return float(np.mean(ap_values))


def evaluate(model, task: str, dataset, batch_size: int = 16) -> Dict[str, float]:
    """Deterministic validation pass; dispatches on the task's head type.

    ``dataset`` is the task's validation split (see the data module); the
    model must be in eval mode so dropout is off and only top-layer outputs
    are consumed.
    """
    from . import data as data_mod

    spec = model.task_specs[task]
    if spec.head == "detection":
        preds, gts = [], []
        for start in range(0, len(dataset), batch_size):
            batch = data_mod.collate_detection(dataset[start : start + batch_size])
            preds.extend(model.predict_detections(batch["images"], task))
            gts.extend(batch["targets"])
        return {
            "mAP": mean_average_precision(preds, gts),
            "mAP50": mean_average_precision(preds, gts, iou_thresholds=[0.5]),
        }
    predicted, gold = [], []
    for start in range(0, len(dataset), batch_size):
        batch = data_mod.collate_classification(dataset[start : start + batch_size])
        predicted.extend(model.predict_labels(batch, task))
        gold.extend(batch["labels"])
    return {"accuracy": accuracy(predicted, gold)}
