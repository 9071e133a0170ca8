"""Accuracy and mAP, checked against an independent precision/recall oracle."""
import numpy as np
import pytest

from polytask.evaluation import COCO_THRESHOLDS, accuracy, mean_average_precision
from polytask.heads import Detection


# ---------------------------------------------------------------------------
# oracle: plain-python AP with corner-form IoU and direct per-point
# interpolation; shares no code with the evaluator
# ---------------------------------------------------------------------------

def _iou_corners(a, b):
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def oracle_map(predictions, ground_truths, thresholds):
    classes = sorted({int(c) for gt in ground_truths for c in gt["classes"]})
    if not classes:
        return 0.0
    aps = []
    for cls in classes:
        entries = []
        order = 0
        for img, dets in enumerate(predictions):
            for d in dets:
                if int(d.class_id) == cls:
                    entries.append((-float(d.score), order, img, [float(v) for v in d.box]))
                order += 1
        entries.sort()
        num_gt = sum(int((np.asarray(gt["classes"]) == cls).sum()) for gt in ground_truths)
        for thr in thresholds:
            if num_gt == 0 or not entries:
                aps.append(0.0)
                continue
            taken = {}
            flags = []
            for _, _, img, box in entries:
                gt = ground_truths[img]
                best, best_j = -1.0, -1
                for j, (gc, gb) in enumerate(zip(gt["classes"], gt["boxes"])):
                    if int(gc) != cls or taken.get((img, j)):
                        continue
                    iou = _iou_corners(box, [float(v) for v in gb])
                    if iou > best:
                        best, best_j = iou, j
                if best >= thr and best_j >= 0:
                    taken[(img, best_j)] = True
                    flags.append(1)
                else:
                    flags.append(0)
            precisions, recalls, tp = [], [], 0
            for k, f in enumerate(flags, start=1):
                tp += f
                precisions.append(tp / k)
                recalls.append(tp / num_gt)
            total = 0.0
            for r in np.linspace(0.0, 1.0, 101):
                best = 0.0
                for p, rec in zip(precisions, recalls):
                    if rec >= r - 1e-12 and p > best:
                        best = p
                total += best
            aps.append(total / 101.0)
    return sum(aps) / len(aps)


def _random_scene(rng, num_classes=3):
    n = int(rng.integers(1, 5))
    classes = rng.integers(0, num_classes, size=n)
    boxes = np.stack([
        rng.uniform(0.2, 0.8, size=n), rng.uniform(0.2, 0.8, size=n),
        rng.uniform(0.05, 0.3, size=n), rng.uniform(0.05, 0.3, size=n),
    ], axis=1)
    return {"classes": classes, "boxes": boxes}


def _random_predictions(rng, gt, num_classes=3):
    dets = []
    for cls, box in zip(gt["classes"], gt["boxes"]):
        if rng.random() < 0.8:  # noisy copy of the ground truth
            noisy = box + rng.normal(0.0, 0.03, size=4)
            dets.append(Detection(int(cls), float(rng.random()), noisy))
    for _ in range(int(rng.integers(0, 3))):  # spurious boxes
        dets.append(Detection(int(rng.integers(num_classes)), float(rng.random()),
                              rng.uniform(0.1, 0.9, size=4)))
    return dets


class TestAccuracy:
    def test_basic(self):
        assert accuracy([1, 2, 3, 4], [1, 2, 0, 4]) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            accuracy([], [])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            accuracy([1], [1, 2])


class TestMeanAveragePrecision:
    def test_perfect_predictions_exactly_one(self):
        rng = np.random.default_rng(0)
        gts = [_random_scene(rng) for _ in range(10)]
        preds = [
            [Detection(int(c), 0.9, b.copy()) for c, b in zip(gt["classes"], gt["boxes"])]
            for gt in gts
        ]
        assert mean_average_precision(preds, gts) == 1.0

    def test_fp_ranked_above_tp_halves_ap(self):
        gt = {"classes": np.array([0]), "boxes": np.array([[0.5, 0.5, 0.2, 0.2]])}
        preds = [[
            Detection(0, 0.9, np.array([0.1, 0.1, 0.05, 0.05])),  # no overlap
            Detection(0, 0.8, np.array([0.5, 0.5, 0.2, 0.2])),
        ]]
        assert mean_average_precision(preds, [gt], iou_thresholds=[0.5]) == pytest.approx(0.5, abs=1e-12)

    def test_duplicate_of_one_gt_gives_single_tp(self):
        # second exact copy ranks below the first: TP then FP, envelope keeps AP at 1
        gt = {"classes": np.array([0]), "boxes": np.array([[0.5, 0.5, 0.2, 0.2]])}
        preds = [[
            Detection(0, 0.9, np.array([0.5, 0.5, 0.2, 0.2])),
            Detection(0, 0.8, np.array([0.5, 0.5, 0.2, 0.2])),
        ]]
        assert mean_average_precision(preds, [gt], iou_thresholds=[0.5]) == 1.0

    def test_no_ground_truth_classes(self):
        assert mean_average_precision([[]], [{"classes": np.array([]), "boxes": np.zeros((0, 4))}]) == 0.0

    def test_image_count_mismatch(self):
        with pytest.raises(ValueError, match="counts differ"):
            mean_average_precision([[]], [])

    def test_matches_oracle_on_random_scenes(self):
        rng = np.random.default_rng(7)
        gts = [_random_scene(rng) for _ in range(50)]
        preds = [_random_predictions(rng, gt) for gt in gts]
        ours = mean_average_precision(preds, gts)
        ref = oracle_map(preds, gts, COCO_THRESHOLDS)
        assert ours == pytest.approx(ref, abs=1e-9)

    def test_matches_oracle_at_single_threshold(self):
        rng = np.random.default_rng(8)
        gts = [_random_scene(rng) for _ in range(20)]
        preds = [_random_predictions(rng, gt) for gt in gts]
        assert mean_average_precision(preds, gts, iou_thresholds=[0.5]) == pytest.approx(
            oracle_map(preds, gts, [0.5]), abs=1e-9)

    def test_prediction_order_invariance(self):
        rng = np.random.default_rng(9)
        gts = [_random_scene(rng) for _ in range(10)]
        preds = [_random_predictions(rng, gt) for gt in gts]
        # distinct scores so ranking is unambiguous
        score = 0.99
        for dets in preds:
            for d in dets:
                d.score = score
                score -= 0.001
        base = mean_average_precision(preds, gts)
        shuffled = [list(reversed(dets)) for dets in preds]
        assert mean_average_precision(shuffled, gts) == base

    def test_removing_fp_never_decreases_map(self):
        rng = np.random.default_rng(10)
        for trial in range(10):
            gts = [_random_scene(rng) for _ in range(5)]
            preds = [_random_predictions(rng, gt) for gt in gts]
            spurious = [i for i, dets in enumerate(preds) if len(dets) > len(gts[i]["classes"])]
            if not spurious:
                continue
            base = mean_average_precision(preds, gts)
            img = spurious[0]
            trimmed = [list(dets) for dets in preds]
            trimmed[img] = trimmed[img][:-1]  # spurious boxes sit at the tail
            assert mean_average_precision(trimmed, gts) >= base - 1e-12
