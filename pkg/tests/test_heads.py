"""Detection and classification heads plus the detection text format."""
import numpy as np
import pytest

from polytask.autodiff import Tensor
from polytask.heads import (
    ClassifierHead,
    Detection,
    DetectionHead,
    parse_detections,
    postprocess_detections,
    serialize_detections,
)


def rng():
    return np.random.default_rng(21)


class TestDetectionHead:
    def test_output_shapes(self):
        head = DetectionHead(32, num_classes=3, rng=rng())
        states = [Tensor(np.random.default_rng(0).random((2, 5, 32))) for _ in range(2)]
        outs = head(states)
        assert len(outs) == 2
        for logits, boxes in outs:
            assert logits.shape == (2, 5, 4)  # K + 1 with background
            assert boxes.shape == (2, 5, 4)
            assert (boxes.data > 0).all() and (boxes.data < 1).all()

    def test_attr_branch_optional(self):
        head = DetectionHead(32, num_classes=3, rng=rng())
        with pytest.raises(RuntimeError, match="no attribute branch"):
            head.attr_logits(Tensor(np.zeros((1, 2, 32))), 0, np.array([0]), np.array([0]))

    def test_attr_logits_shape(self):
        head = DetectionHead(32, num_classes=3, rng=rng(), num_attributes=4)
        states = Tensor(np.random.default_rng(1).random((2, 6, 32)))
        out = head.attr_logits(states, 1, np.array([0, 3, 5]), np.array([2, 0, 1]))
        assert out.shape == (3, 4)

    def test_attr_logits_condition_on_class(self):
        head = DetectionHead(32, num_classes=3, rng=rng(), num_attributes=4)
        states = Tensor(np.random.default_rng(2).random((1, 4, 32)))
        a = head.attr_logits(states, 0, np.array([1]), np.array([0])).data
        b = head.attr_logits(states, 0, np.array([1]), np.array([1])).data
        assert not np.allclose(a, b)


class TestClassifierHead:
    def test_logit_shape(self):
        head = ClassifierHead(16, 5, rng())
        head.eval()
        out = head(Tensor(np.random.default_rng(3).random((4, 3, 16))))
        assert out.shape == (4, 5)

    def test_reads_only_first_position(self):
        head = ClassifierHead(16, 2, rng())
        head.eval()
        states = np.random.default_rng(4).random((2, 3, 16))
        base = head(Tensor(states)).data
        perturbed = states.copy()
        perturbed[:, 1:] += 10.0
        np.testing.assert_array_equal(head(Tensor(perturbed)).data, base)

    def test_minimum_classes(self):
        with pytest.raises(ValueError, match="two classes"):
            ClassifierHead(16, 1, rng())


class TestPostprocess:
    def _logits(self, rows):
        # rows: per-query class scores; last column is background
        return Tensor(np.array([rows], dtype=np.float64))

    def test_background_argmax_dropped(self):
        logits = self._logits([[5.0, 0.0, 0.0], [0.0, 0.0, 5.0]])
        boxes = Tensor(np.full((1, 2, 4), 0.5))
        dets = postprocess_detections(logits, boxes)
        assert len(dets) == 1 and len(dets[0]) == 1
        assert dets[0][0].class_id == 0

    def test_scores_are_softmax_probabilities(self):
        logits = self._logits([[2.0, 0.0, 0.0]])
        boxes = Tensor(np.full((1, 1, 4), 0.25))
        det = postprocess_detections(logits, boxes)[0][0]
        expected = np.exp(2.0) / (np.exp(2.0) + 2.0)
        assert det.score == pytest.approx(expected, abs=1e-12)
        np.testing.assert_array_equal(det.box, 0.25)

    def test_score_threshold(self):
        logits = self._logits([[0.2, 0.0, 0.1]])  # weak foreground argmax
        boxes = Tensor(np.full((1, 1, 4), 0.5))
        assert postprocess_detections(logits, boxes, score_threshold=0.9) == [[]]

    def test_attributes_use_predicted_class(self):
        head = DetectionHead(8, num_classes=2, rng=rng(), num_attributes=3)
        states = Tensor(np.random.default_rng(5).random((1, 2, 8)))
        (logits, boxes), = head([states])
        forced = np.zeros((1, 2, 3))
        forced[0, :, 0] = 4.0  # both queries predict class 0
        dets = postprocess_detections(Tensor(forced), boxes, head=head, states=states)[0]
        assert len(dets) == 2
        assert all(d.attribute in (0, 1, 2) for d in dets)
        expected = head.attr_logits(states, 0, np.array([0, 1]), np.array([0, 0]))
        np.testing.assert_array_equal(
            [d.attribute for d in dets], np.asarray(expected.data).argmax(axis=-1)
        )


class TestSerialization:
    def test_round_trip_exact(self):
        dets = [
            Detection(2, 0.123456789012345678, np.array([0.1, 0.2, 0.3, 0.4]), attribute=1),
            Detection(0, 1.0 / 3.0, np.array([0.5, 0.5, 0.25, 0.125])),
        ]
        lines = serialize_detections(7, dets)
        parsed = parse_detections(lines)
        assert len(parsed) == 2
        for (img, got), want in zip(parsed, dets):
            assert img == 7
            assert got.class_id == want.class_id
            assert got.score == want.score  # 17 significant digits survive
            np.testing.assert_array_equal(got.box, want.box)
            assert got.attribute == want.attribute

    def test_malformed_line(self):
        with pytest.raises(ValueError, match="malformed"):
            parse_detections(["1 2 0.5 0.1 0.2"])
