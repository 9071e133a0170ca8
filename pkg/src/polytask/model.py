"""Full multitask model: modality encoders, unified decoder, per-task heads.

The model is always built over a task universe (all registered tasks by
default) even when only a subset trains; this keeps parameter names and
shapes identical across runs so partial checkpoint loads line up. Parameter
names follow the component attributes: image_encoder.*, text_encoder.*,
decoder.* (including decoder.queries.<task>), det_head.<task>.*,
cls_head.<task>.*.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .data import TaskSpec
from .decoder import UnifiedDecoder, concat_modalities
from .encoders import ImageEncoder, TextEncoder
from .heads import ClassifierHead, Detection, DetectionHead, postprocess_detections
from .matching import DetectionLossWeights, detection_loss
from .nn import Module, ModuleDict


class MultitaskModel(Module):
    def __init__(
        self,
        task_specs: Dict[str, TaskSpec],
        vocab_size: int,
        seed: int = 0,
        decoder_mode: str = "shared",
        encoder_hidden: int = 64,
        encoder_layers: int = 2,
        text_layers: int = 2,
        decoder_hidden: int = 64,
        decoder_layers: int = 2,
        num_heads: int = 4,
        ffn_dim: int = 128,
        dropout: float = 0.1,
        max_text_len: int = 48,
        use_task_tokens: bool = True,
        cls_only: bool = True,
        all_layer_cls_loss: bool = False,
        loss_weights: DetectionLossWeights = DetectionLossWeights(),
    ) -> None:
        super().__init__()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        tasks = list(task_specs)
        self.task_specs = dict(task_specs)
        self.use_task_tokens = use_task_tokens
        self.cls_only = cls_only
        self.all_layer_cls_loss = all_layer_cls_loss
        self.loss_weights = loss_weights
        self.image_encoder = ImageEncoder(
            tasks, encoder_hidden, encoder_layers, num_heads, ffn_dim, dropout, rng
        )
        self.text_encoder = TextEncoder(
            tasks, vocab_size, encoder_hidden, text_layers, num_heads, ffn_dim, dropout, rng,
            max_len=max_text_len,
        )
        self.decoder = UnifiedDecoder(
            tasks,
            {t: s.queries for t, s in task_specs.items()},
            decoder_mode,
            image_width=encoder_hidden,
            text_width=encoder_hidden,
            hidden=decoder_hidden,
            layers=decoder_layers,
            num_heads=num_heads,
            ffn_dim=ffn_dim,
            dropout=dropout,
            rng=rng,
        )
        self.det_head = ModuleDict(
            {
                t: DetectionHead(decoder_hidden, s.num_classes, rng, num_attributes=s.num_attributes)
                for t, s in task_specs.items()
                if s.head == "detection"
            }
        )
        self.cls_head = ModuleDict(
            {
                t: ClassifierHead(decoder_hidden, s.num_classes, rng, dropout=dropout)
                for t, s in task_specs.items()
                if s.head == "classifier"
            }
        )

    # ------------------------------------------------------------------
    # forward paths
    # ------------------------------------------------------------------

    def _decode_task(
        self,
        task: str,
        images: Optional[np.ndarray],
        tokens: Optional[np.ndarray],
        rng: Optional[np.random.Generator],
    ) -> List[Tensor]:
        spec = self.task_specs[task]
        stack = self.decoder.select_decoder(task)
        h_v = h_t = text_mask = None
        if spec.modality in ("vision", "vision_text"):
            if images is None:
                raise ValueError(f"task {task!r} needs images")
            h_v = self.image_encoder(images, task, use_task_token=self.use_task_tokens, rng=rng)
        if spec.modality in ("text", "vision_text"):
            if tokens is None:
                raise ValueError(f"task {task!r} needs tokens")
            h_t, text_mask = self.text_encoder(
                tokens, task, use_task_token=self.use_task_tokens, cls_only=self.cls_only, rng=rng
            )
        if h_v is not None and h_t is not None:
            memory, mask, _ = concat_modalities(
                stack.project_image(h_v), stack.project_text(h_t), text_mask
            )
        elif h_v is not None:
            memory, mask = stack.project_image(h_v), None
        else:
            memory, mask = stack.project_text(h_t), text_mask
        return self.decoder.decode(memory, task, memory_mask=mask, rng=rng)

    def detection_outputs(
        self, images: np.ndarray, task: str, rng: Optional[np.random.Generator] = None
    ):
        """(per-layer (logits, boxes), per-layer decoder states); all layers in
        train mode, only the top layer in eval mode."""
        if self.task_specs[task].head != "detection":
            raise ValueError(f"task {task!r} has no detection head")
        states = self._decode_task(task, images, None, rng)
        if not self.training:
            states = states[-1:]
        return self.det_head[task](states), states

    def classification_logits(
        self,
        task: str,
        tokens: Optional[np.ndarray],
        images: Optional[np.ndarray],
        rng: Optional[np.random.Generator] = None,
    ) -> List[Tensor]:
        """Logit sets for a classifier task; one per layer only when the
        all-layer loss ablation is active in train mode, else just the top."""
        if self.task_specs[task].head != "classifier":
            raise ValueError(f"task {task!r} has no classifier head")
        states = self._decode_task(task, images, tokens, rng)
        head = self.cls_head[task]
        if self.training and self.all_layer_cls_loss:
            return [head(h, rng=rng) for h in states]
        return [head(states[-1], rng=rng)]

    # ------------------------------------------------------------------
    # losses and predictions
    # ------------------------------------------------------------------

    def task_loss(self, batch: dict, task: str, rng: Optional[np.random.Generator] = None) -> Tensor:
        spec = self.task_specs[task]
        if spec.head == "detection":
            layers, states = self.detection_outputs(batch["images"], task, rng=rng)
            attr_fns = None
            if spec.num_attributes > 0:
                head = self.det_head[task]
                attr_fns = [
                    (lambda h: lambda b, q, c: head.attr_logits(h, b, q, c))(h) for h in states
                ]
            loss, _ = detection_loss(
                layers, batch["targets"], spec.num_classes, weights=self.loss_weights, attr_fns=attr_fns
            )
            return loss
        logits_list = self.classification_logits(
            task, batch.get("tokens"), batch.get("images"), rng=rng
        )
        total = None
        for logits in logits_list:
            term = ops.cross_entropy(logits, batch["labels"])
            total = term if total is None else ops.add(total, term)
        return total

    def predict_detections(
        self, images: np.ndarray, task: str, score_threshold: float = 0.0
    ) -> List[List[Detection]]:
        layers, states = self.detection_outputs(images, task)
        logits, boxes = layers[-1]
        return postprocess_detections(
            logits, boxes, head=self.det_head[task], states=states[-1], score_threshold=score_threshold
        )

    def predict_labels(self, batch: dict, task: str) -> np.ndarray:
        logits = self.classification_logits(task, batch.get("tokens"), batch.get("images"))[-1]
        return np.asarray(logits.data).argmax(axis=-1)
