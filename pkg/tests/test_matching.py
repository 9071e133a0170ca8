"""Box geometry, assignment, and the set-prediction loss."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polytask.autodiff import Tape, Tensor, ops
from polytask.matching import (
    DetectionLossWeights,
    cxcywh_to_xyxy,
    giou,
    giou_pairwise,
    giou_tensor,
    hungarian_match,
    iou_pairwise,
    layer_detection_loss,
    matching_cost,
)


def random_boxes(rng, n):
    cx = rng.uniform(0.2, 0.8, n)
    cy = rng.uniform(0.2, 0.8, n)
    w = rng.uniform(0.05, 0.4, n)
    h = rng.uniform(0.05, 0.4, n)
    return np.stack([cx, cy, w, h], axis=1)


class TestGiou:
    def test_identical_boxes(self):
        b = np.array([0.5, 0.5, 0.2, 0.3])
        assert abs(giou(b, b) - 1.0) < 1e-12

    def test_worked_example_far_apart(self):
        # unit squares at opposite corners of a 3x1 strip: IoU 0, hull 3,
        # union 2 -> GIoU = 0 - (3-2)/3 = -1/3
        a = np.array([0.5, 0.5, 1.0, 1.0])
        b = np.array([2.5, 0.5, 1.0, 1.0])
        assert abs(giou(a, b) - (-1.0 / 3.0)) < 1e-12

    def test_worked_example_abutting(self):
        # adjacent unit squares: IoU 0 but hull == union -> GIoU 0
        a = np.array([0.5, 0.5, 1.0, 1.0])
        b = np.array([1.5, 0.5, 1.0, 1.0])
        assert abs(giou(a, b) - 0.0) < 1e-12

    def test_range_and_iou_bound(self):
        rng = np.random.default_rng(0)
        a = random_boxes(rng, 2000)
        b = random_boxes(rng, 2000)
        g = np.array([giou(x, y) for x, y in zip(a, b)])
        ious = np.diag(iou_pairwise(a, b))
        assert np.all(g > -1.0) and np.all(g <= 1.0 + 1e-12)
        assert np.all(g <= ious + 1e-12)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            giou(np.array([0.5, 0.5, 0.0, 0.1]), np.array([0.5, 0.5, 0.1, 0.1]))

    def test_pairwise_matches_scalar(self):
        rng = np.random.default_rng(3)
        a, b = random_boxes(rng, 6), random_boxes(rng, 4)
        table = giou_pairwise(a, b)
        for i in range(6):
            for j in range(4):
                assert abs(table[i, j] - giou(a[i], b[j])) < 1e-12

    def test_tensor_matches_scalar_and_backprops(self):
        rng = np.random.default_rng(4)
        pred = random_boxes(rng, 5)
        tgt = random_boxes(rng, 5)
        t = Tensor(pred, requires_grad=True)
        with Tape() as tape:
            g = giou_tensor(t, tgt)
            tape.backward(ops.sum_(g))
        for i in range(5):
            assert abs(float(g.data[i]) - giou(pred[i], tgt[i])) < 1e-12
        assert t.grad is not None and np.isfinite(t.grad).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_giou_symmetry_and_translation(seed):
    rng = np.random.default_rng(seed)
    a, b = random_boxes(rng, 1)[0], random_boxes(rng, 1)[0]
    assert abs(giou(a, b) - giou(b, a)) < 1e-12
    shift = np.array([0.13, -0.07, 0.0, 0.0])
    assert abs(giou(a + shift, b + shift) - giou(a, b)) < 1e-10


class TestHungarian:
    def test_two_by_two_worked_example(self):
        costs = np.array([[1.0, 2.0], [2.0, 1.0]])
        assign = hungarian_match(costs)
        assert list(assign) == [0, 1]
        assert costs[assign, np.arange(2)].sum() == 2.0

    def test_matches_brute_force_square(self):
        rng = np.random.default_rng(11)
        for m in range(1, 6):
            for _ in range(60):
                costs = rng.normal(size=(m, m))
                assign = hungarian_match(costs)
                best = min(
                    (sum(costs[p[j], j] for j in range(m)) for p in itertools.permutations(range(m))),
                )
                got = sum(costs[assign[j], j] for j in range(m))
                assert abs(got - best) < 1e-9

    def test_matches_brute_force_rectangular(self):
        rng = np.random.default_rng(12)
        q = 6
        for m in range(1, q + 1):
            for _ in range(40):
                costs = rng.normal(size=(q, m))
                assign = hungarian_match(costs)
                assert len(set(assign.tolist())) == m
                best = min(
                    sum(costs[list(p)[j], j] for j in range(m))
                    for p in itertools.permutations(range(q), m)
                )
                got = sum(costs[assign[j], j] for j in range(m))
                assert abs(got - best) < 1e-9

    def test_tie_break_lexicographic(self):
        # every assignment costs the same; the smallest tuple must win
        costs = np.zeros((4, 3))
        assert list(hungarian_match(costs)) == [0, 1, 2]
        costs = np.array([[1.0, 1.0], [1.0, 1.0], [0.5, 0.5]])
        # optimal must use query 2 once; lexicographic prefers (0,2) over (2,0)? no:
        # both (0,2) and (2,0) cost 1.5, as does (1,2)/(2,1); smallest tuple is (0,2)
        assert list(hungarian_match(costs)) == [0, 2]

    def test_more_targets_than_queries_rejected(self):
        with pytest.raises(ValueError):
            hungarian_match(np.zeros((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            hungarian_match(np.array([[np.inf, 0.0], [0.0, 1.0]]))


class TestMatchingCost:
    def test_perfect_prediction_cost(self):
        # probability 1 on the right class and an exact box:
        # -lambda_cls*1 + lambda_l1*0 - lambda_giou*1
        probs = np.zeros((3, 4))
        probs[1, 2] = 1.0
        boxes = np.array([[0.1, 0.1, 0.05, 0.05], [0.5, 0.5, 0.2, 0.2], [0.9, 0.9, 0.05, 0.05]])
        tc = np.array([2])
        tb = boxes[1:2]
        costs = matching_cost(probs, boxes, tc, tb, lambda_cls=1.0, lambda_l1=5.0, lambda_giou=2.0)
        assert costs.shape == (3, 1)
        assert abs(costs[1, 0] - (-3.0)) < 1e-12
        assert costs[1, 0] == costs.min()


class TestDetectionLoss:
    def _targets(self):
        return [
            {"classes": np.array([0, 2]), "boxes": np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.25, 0.3]])},
            {"classes": np.array([1]), "boxes": np.array([[0.5, 0.5, 0.4, 0.4]])},
        ]

    def test_near_perfect_predictions_near_zero_loss(self):
        targets = self._targets()
        q, k = 5, 3
        logits = np.full((2, q, k + 1), -40.0)
        boxes = np.full((2, q, 4), 0.5)
        logits[:, :, k] = 40.0  # unmatched queries scream background
        for i, tgt in enumerate(targets):
            for j, (c, bx) in enumerate(zip(tgt["classes"], tgt["boxes"])):
                logits[i, j, :] = -40.0
                logits[i, j, c] = 40.0
                boxes[i, j] = bx
        loss, assigns = layer_detection_loss(
            Tensor(logits), Tensor(boxes), targets, num_classes=k
        )
        assert float(loss.data) < 1e-6
        assert list(assigns[0]) == [0, 1] and list(assigns[1]) == [0]

    def test_background_weight_scales_unmatched_ce(self):
        targets = [{"classes": np.array([], dtype=int), "boxes": np.zeros((0, 4))}]
        logits = np.zeros((1, 4, 3))  # uniform -> nll ln3 per query, all background
        boxes = np.full((1, 4, 4), 0.5)
        w = DetectionLossWeights(bg_weight=0.1)
        loss, _ = layer_detection_loss(Tensor(logits), Tensor(boxes), targets, num_classes=2, weights=w)
        # weight-normalized mean: (0.1*ln3 * 4)/(0.1*4) = ln3
        assert abs(float(loss.data) - math.log(3.0)) < 1e-12

    def test_gradients_flow_at_float32(self):
        # regression: mixed-dtype coercion once silently detached the graph
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(2, 5, 4)).astype(np.float32), requires_grad=True)
        raw = Tensor(rng.normal(size=(2, 5, 4)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss, _ = layer_detection_loss(
                logits, ops.sigmoid(raw), self._targets(), num_classes=3
            )
            reached = tape.backward(loss)
        assert logits in reached and raw in reached
        assert np.abs(raw.grad).max() > 0

    def test_loss_invariant_to_target_order(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(1, 6, 4))
        boxes = 1 / (1 + np.exp(-rng.normal(size=(1, 6, 4))))
        tgt = {"classes": np.array([0, 1, 2]), "boxes": random_boxes(rng, 3)}
        perm = np.array([2, 0, 1])
        flipped = {"classes": tgt["classes"][perm], "boxes": tgt["boxes"][perm]}
        l1, _ = layer_detection_loss(Tensor(logits), Tensor(boxes), [tgt], num_classes=3)
        l2, _ = layer_detection_loss(Tensor(logits), Tensor(boxes), [flipped], num_classes=3)
        assert float(l1.data) == float(l2.data)


class TestBoxConversion:
    def test_cxcywh_round_values(self):
        out = cxcywh_to_xyxy(np.array([[0.5, 0.5, 0.2, 0.4]]))
        assert np.allclose(out, [[0.4, 0.3, 0.6, 0.7]], atol=1e-12)
