"""Bipartite matching and set-prediction losses for detection.

Boxes are (cx, cy, w, h) in normalized coordinates throughout. The cost
matrix orientation is (queries x ground truths); an assignment maps each
ground-truth index to a distinct query index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import Tensor, ops


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def giou(box_a, box_b) -> float:
    """Generalized IoU of two (cx, cy, w, h) boxes; always in (-1, 1]."""
    a = np.asarray(box_a, dtype=np.float64)
    b = np.asarray(box_b, dtype=np.float64)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError("giou requires strictly positive box extents")
    return float(giou_pairwise(a[None, :], b[None, :])[0, 0])


def giou_pairwise(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """All-pairs GIoU: (N, 4) x (M, 4) -> (N, M)."""
    a = cxcywh_to_xyxy(boxes_a)[:, None, :]
    b = cxcywh_to_xyxy(boxes_b)[None, :, :]
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    ex1 = np.minimum(a[..., 0], b[..., 0])
    ey1 = np.minimum(a[..., 1], b[..., 1])
    ex2 = np.maximum(a[..., 2], b[..., 2])
    ey2 = np.maximum(a[..., 3], b[..., 3])
    enclosing = (ex2 - ex1) * (ey2 - ey1)
    return inter / union - (enclosing - union) / enclosing


def iou_pairwise(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = cxcywh_to_xyxy(boxes_a)[:, None, :]
    b = cxcywh_to_xyxy(boxes_b)[None, :, :]
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def _col(t: Tensor, i: int) -> Tensor:
    return ops.slice_(t, (slice(None), i))


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable elementwise GIoU of matched (N, 4) box pairs -> (N,)."""
    tb = cxcywh_to_xyxy(target).astype(pred.dtype)
    cx, cy, w, h = (_col(pred, i) for i in range(4))
    half = 0.5
    ax1, ay1 = ops.sub(cx, ops.mul(w, half)), ops.sub(cy, ops.mul(h, half))
    ax2, ay2 = ops.add(cx, ops.mul(w, half)), ops.add(cy, ops.mul(h, half))
    bx1, by1, bx2, by2 = tb[:, 0], tb[:, 1], tb[:, 2], tb[:, 3]
    iw = ops.relu(ops.sub(ops.minimum(ax2, bx2), ops.maximum(ax1, bx1)))
    ih = ops.relu(ops.sub(ops.minimum(ay2, by2), ops.maximum(ay1, by1)))
    inter = ops.mul(iw, ih)
    area_a = ops.mul(w, h)
    area_b = (tb[:, 2] - tb[:, 0]) * (tb[:, 3] - tb[:, 1])
    union = ops.sub(ops.add(area_a, area_b), inter)
    ew = ops.sub(ops.maximum(ax2, bx2), ops.minimum(ax1, bx1))
    eh = ops.sub(ops.maximum(ay2, by2), ops.minimum(ay1, by1))
    enclosing = ops.mul(ew, eh)
    return ops.sub(ops.div(inter, union), ops.div(ops.sub(enclosing, union), enclosing))


def hungarian_match(costs: np.ndarray) -> np.ndarray:
    """Minimum-cost injective assignment of ground truths to queries.

    ``costs`` is (q, M) with M <= q. Returns an int array ``assign`` of length
    M where ``assign[j]`` is the query matched to ground truth j. Among all
    minimum-cost assignments the lexicographically smallest vector is
    returned, which pins down a unique result under cost ties.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError("cost matrix must be 2-d")
    q, m = costs.shape
    if m > q:
        raise ValueError(f"more ground truths ({m}) than queries ({q})")
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.isfinite(costs).all():
        raise ValueError("cost matrix contains non-finite entries")
    by_gt = costs.T  # (M, q): one row per ground truth
    rows, cols = linear_sum_assignment(by_gt)
    best_total = by_gt[rows, cols].sum()
    tol = 1e-12 * (1.0 + abs(best_total))

    assign = np.empty(m, dtype=np.int64)
    free = list(range(q))
    prefix = 0.0
    for j in range(m):
        rest = by_gt[j + 1 :]
        chosen = -1
        for pos, c in enumerate(free):
            cand = prefix + by_gt[j, c]
            remaining = [x for x in free if x != c]
            if rest.size:
                sub = rest[:, remaining]
                # admissible lower bound: per-row column minima
                if cand + sub.min(axis=1).sum() > best_total + tol:
                    continue
                r2, c2 = linear_sum_assignment(sub)
                cand += sub[r2, c2].sum()
            if cand <= best_total + tol:
                chosen = pos
                prefix += by_gt[j, c]
                break
        assign[j] = free.pop(chosen)
    return assign


def matching_cost(
    class_probs: np.ndarray,
    boxes: np.ndarray,
    target_classes: np.ndarray,
    target_boxes: np.ndarray,
    lambda_cls: float = 1.0,
    lambda_l1: float = 5.0,
    lambda_giou: float = 2.0,
) -> np.ndarray:
    """DETR matching cost (q, M): -l_cls*p + l_L1*||.||_1 - l_giou*GIoU."""
    probs = np.asarray(class_probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    tc = np.asarray(target_classes, dtype=np.int64)
    tb = np.asarray(target_boxes, dtype=np.float64)
    if tc.size == 0:
        return np.zeros((boxes.shape[0], 0))
    cls_cost = -probs[:, tc]
    l1_cost = np.abs(boxes[:, None, :] - tb[None, :, :]).sum(axis=-1)
    giou_cost = -giou_pairwise(boxes, tb)
    return lambda_cls * cls_cost + lambda_l1 * l1_cost + lambda_giou * giou_cost


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class DetectionLossWeights:
    lambda_cls: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    bg_weight: float = 0.1
    attr_coef: float = 0.5


AttrLogitsFn = Callable[[int, np.ndarray, np.ndarray], Tensor]


def layer_detection_loss(
    class_logits: Tensor,
    boxes: Tensor,
    targets: Sequence[dict],
    num_classes: int,
    weights: DetectionLossWeights = DetectionLossWeights(),
    attr_fn: Optional[AttrLogitsFn] = None,
) -> Tuple[Tensor, List[np.ndarray]]:
    """Matched loss for one decoder layer over a batch.

    ``class_logits`` (B, q, K+1) and ``boxes`` (B, q, 4) carry gradients;
    ``targets[b]`` holds numpy arrays 'classes' (M,), 'boxes' (M, 4) and
    optionally 'attributes' (M,). The matching itself is recomputed from
    detached values and treated as a constant. ``attr_fn(b, queries, classes)``
    returns attribute logits for the matched queries of image b conditioned on
    the ground-truth classes. Returns the scalar loss and per-image
    assignments.
    """
    b, q, c = class_logits.shape
    if c != num_classes + 1:
        raise ValueError(f"expected {num_classes + 1} class logits, got {c}")
    assignments: List[np.ndarray] = []
    ce_targets = np.full((b, q), num_classes, dtype=np.int64)
    matched_rows: List[np.ndarray] = []  # flattened (image, query) row index
    matched_tboxes: List[np.ndarray] = []
    for i, tgt in enumerate(targets):
        tc = np.asarray(tgt["classes"], dtype=np.int64)
        tb = np.asarray(tgt["boxes"], dtype=np.float64)
        if tc.size == 0:
            assignments.append(np.zeros(0, dtype=np.int64))
            continue
        probs = _softmax_np(class_logits.data[i])
        costs = matching_cost(
            probs, boxes.data[i], tc, tb,
            lambda_cls=weights.lambda_cls, lambda_l1=weights.lambda_l1, lambda_giou=weights.lambda_giou,
        )
        assign = hungarian_match(costs)
        assignments.append(assign)
        ce_targets[i, assign] = tc
        # canonical query order keeps reductions independent of gt ordering
        order = np.argsort(assign)
        matched_rows.append(i * q + assign[order])
        matched_tboxes.append(tb[order])

    class_weights = np.concatenate([np.ones(num_classes), [weights.bg_weight]])
    loss = ops.cross_entropy(
        class_logits.reshape(b * q, c), ce_targets.reshape(-1), class_weights=class_weights
    )
    if matched_rows:
        rows = np.concatenate(matched_rows)
        tboxes = np.concatenate(matched_tboxes)
        n_matched = float(max(len(rows), 1))
        pred = ops.take(boxes.reshape(b * q, 4), rows, axis=0)
        l1 = ops.l1_distance(pred, tboxes.astype(boxes.dtype)) * (1.0 / n_matched)
        g = giou_tensor(pred, tboxes)
        giou_loss = ops.sub(1.0, g).sum() * (1.0 / n_matched)
        loss = ops.add(loss, ops.add(l1 * weights.lambda_l1, giou_loss * weights.lambda_giou))
    if attr_fn is not None:
        attr_terms = []
        for i, (tgt, assign) in enumerate(zip(targets, assignments)):
            if "attributes" not in tgt or assign.size == 0:
                continue
            ta = np.asarray(tgt["attributes"], dtype=np.int64)
            order = np.argsort(assign)
            logits = attr_fn(i, assign[order], np.asarray(tgt["classes"], dtype=np.int64)[order])
            attr_terms.append(ops.cross_entropy(logits, ta[order], reduction="sum"))
        if attr_terms:
            total = attr_terms[0]
            for t in attr_terms[1:]:
                total = ops.add(total, t)
            n_attr = float(sum(len(t["attributes"]) for t in targets if "attributes" in t))
            loss = ops.add(loss, total * (weights.attr_coef / max(n_attr, 1.0)))
    return loss, assignments


def detection_loss(
    layers: Sequence[Tuple[Tensor, Tensor]],
    targets: Sequence[dict],
    num_classes: int,
    weights: DetectionLossWeights = DetectionLossWeights(),
    attr_fns: Optional[Sequence[Optional[AttrLogitsFn]]] = None,
) -> Tuple[Tensor, List[List[np.ndarray]]]:
    """Sum of matched losses over all decoder layers (auxiliary supervision).

    ``layers`` is a sequence of (class_logits, boxes) pairs, one per decoder
    layer; matching is recomputed independently for every layer.
    """
    total = None
    all_assignments = []
    for idx, (logits, boxes) in enumerate(layers):
        fn = attr_fns[idx] if attr_fns is not None else None
        loss, assigns = layer_detection_loss(logits, boxes, targets, num_classes, weights=weights, attr_fn=fn)
        all_assignments.append(assigns)
        total = loss if total is None else ops.add(total, loss)
    return total, all_assignments
