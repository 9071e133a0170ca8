"""Output heads: detection (class/box/attribute) and classification.

Detection heads are shared across decoder layers but private to their task.
Box outputs are sigmoid-bounded (cx, cy, w, h) in (0, 1). The attribute head
sees the decoder state concatenated with a class embedding: the ground-truth
class while training, the predicted class at inference.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, ops
from .nn import Embedding, Linear, Module


@dataclass
class Detection:
    class_id: int
    score: float
    box: np.ndarray  # (4,) cx, cy, w, h
    attribute: int = -1


class DetectionHead(Module):
    def __init__(
        self,
        hidden: int,
        num_classes: int,
        rng: np.random.Generator,
        num_attributes: int = 0,
        class_embed_dim: int = 16,
    ) -> None:
        super().__init__()
        self.num_classes = num_classes
        self.num_attributes = num_attributes
        self.class_head = Linear(hidden, num_classes + 1, rng)
        self.box1 = Linear(hidden, hidden, rng)
        self.box2 = Linear(hidden, hidden, rng)
        self.box3 = Linear(hidden, 4, rng)
        if num_attributes > 0:
            self.class_embed = Embedding(num_classes, class_embed_dim, rng)
            self.attr_head = Linear(hidden + class_embed_dim, num_attributes, rng)

    def __call__(self, layer_states: Sequence[Tensor]) -> List[Tuple[Tensor, Tensor]]:
        """(class logits (B, q, K+1), boxes (B, q, 4)) for each given layer."""
        outputs = []
        for h in layer_states:
            logits = self.class_head(h)
            boxes = ops.sigmoid(self.box3(ops.relu(self.box2(ops.relu(self.box1(h))))))
            outputs.append((logits, boxes))
        return outputs

    def attr_logits(self, states: Tensor, batch_index: int, query_idx: np.ndarray, class_ids: np.ndarray) -> Tensor:
        """Attribute logits (M, A) for selected queries of one image.

        ``states`` is one layer's (B, q, d) output; ``class_ids`` conditions
        the prediction (ground truth during training, argmax at eval).
        """
        if self.num_attributes == 0:
            raise RuntimeError("this detection head has no attribute branch")
        b, q, d = states.shape
        rows = ops.take(states.reshape(b * q, d), batch_index * q + np.asarray(query_idx), axis=0)
        emb = self.class_embed(np.asarray(class_ids, dtype=np.int64))
        return self.attr_head(ops.concat([rows, emb], axis=1))


class ClassifierHead(Module):
    """Two-layer GeLU classifier applied to the first decoder position."""

    def __init__(self, hidden: int, num_classes: int, rng: np.random.Generator, dropout: float = 0.0) -> None:
        super().__init__()
        if num_classes < 2:
            raise ValueError("classification needs at least two classes")
        self.hidden_proj = Linear(hidden, hidden, rng)
        self.out_proj = Linear(hidden, num_classes, rng)
        self.dropout = dropout

    def __call__(self, top_layer: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits (B, num_classes) from the first query position."""
        first = ops.slice_(top_layer, (slice(None), 0))
        h = ops.gelu(self.hidden_proj(first))
        h = ops.dropout(h, self.dropout, rng, training=self.training)
        return self.out_proj(h)


def postprocess_detections(
    class_logits: Tensor,
    boxes: Tensor,
    head: Optional[DetectionHead] = None,
    states: Optional[Tensor] = None,
    score_threshold: float = 0.0,
) -> List[List[Detection]]:
    """Turn one layer's raw outputs into per-image detection lists.

    Per query: softmax over K+1 classes, drop background argmaxes, keep the
    rest when their probability exceeds the threshold. When the head has an
    attribute branch (and ``states`` is given), each kept query's attribute is
    the argmax of logits conditioned on its predicted class.
    """
    probs = np.asarray(class_logits.data, dtype=np.float64)
    shifted = probs - probs.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    box_data = np.asarray(boxes.data, dtype=np.float64)
    bg = probs.shape[-1] - 1
    results: List[List[Detection]] = []
    for i in range(probs.shape[0]):
        arg = probs[i].argmax(axis=-1)
        keep = np.flatnonzero((arg != bg) & (probs[i, np.arange(arg.size), arg] > score_threshold))
        dets = [
            Detection(int(arg[j]), float(probs[i, j, arg[j]]), box_data[i, j].copy())
            for j in keep
        ]
        if head is not None and head.num_attributes > 0 and states is not None and keep.size:
            attr = head.attr_logits(states, i, keep, arg[keep])
            choices = np.asarray(attr.data).argmax(axis=-1)
            for det, a in zip(dets, choices):
                det.attribute = int(a)
        results.append(dets)
    return results


def serialize_detections(image_id: int, detections: Sequence[Detection]) -> List[str]:
    """One line per detection: image_id class score cx cy w h attribute."""
    lines = []
    for d in detections:
        fields = [str(image_id), str(d.class_id), format(d.score, ".17g")]
        fields += [format(float(v), ".17g") for v in d.box]
        fields.append(str(d.attribute))
        lines.append(" ".join(fields))
    return lines


def parse_detections(lines: Sequence[str]) -> List[Tuple[int, Detection]]:
    out = []
    for line in lines:
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"malformed detection line: {line!r}")
        image_id, class_id = int(parts[0]), int(parts[1])
        score = float(parts[2])
        box = np.array([float(v) for v in parts[3:7]])
        out.append((image_id, Detection(class_id, score, box, int(parts[7]))))
    return out
