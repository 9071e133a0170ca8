"""Task-conditioned decoding over encoded modality sequences.

A decoder stack projects encoder states to the decoder width and runs N
decoder layers, returning every layer's output (training supervises all of
them). Query embeddings are per task: they seed the decoder input and act as
the positional signal re-added at each layer. The stack itself is either one
shared instance or one per task.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, ops
from .nn import Linear, Module, ModuleDict, ModuleList
from .transformer import DecoderLayer

SHARED = "shared"
SEPARATE = "separate"


def concat_modalities(
    h_image: Tensor, h_text: Tensor, text_mask: Optional[np.ndarray] = None
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Join projected image and text states, image positions first.

    Returns (sequence (B, L+S, d), validity mask (B, L+S), modality origin
    array with 0 for image and 1 for text positions).
    """
    if h_image.shape[-1] != h_text.shape[-1]:
        raise ValueError(
            f"modality widths differ after projection: {h_image.shape[-1]} vs {h_text.shape[-1]}"
        )
    if h_text.shape[1] == 0:
        raise ValueError("cannot concatenate an empty text sequence")
    b, l = h_image.shape[0], h_image.shape[1]
    s = h_text.shape[1]
    if text_mask is None:
        text_mask = np.ones((b, s), dtype=bool)
    mask = np.concatenate([np.ones((b, l), dtype=bool), np.asarray(text_mask, dtype=bool)], axis=1)
    origin = np.concatenate([np.zeros(l, dtype=np.int64), np.ones(s, dtype=np.int64)])
    return ops.concat([h_image, h_text], axis=1), mask, origin


class DecoderStack(Module):
    """Per-modality input projections plus N decoder layers at one width."""

    def __init__(
        self,
        image_width: int,
        text_width: int,
        hidden: int,
        layers: int,
        num_heads: int,
        ffn_dim: int,
        dropout: float,
        rng: np.random.Generator,
    ) -> None:
        super().__init__()
        # projections always exist (even at equal widths) so every stack has
        # an identical parameter count in shared and separate modes
        self.proj_image = Linear(image_width, hidden, rng)
        self.proj_text = Linear(text_width, hidden, rng)
        self.layers = ModuleList(
            DecoderLayer(hidden, num_heads, ffn_dim, dropout, rng) for _ in range(layers)
        )
        self.hidden = hidden

    def project_image(self, h: Tensor) -> Tensor:
        return self.proj_image(h)

    def project_text(self, h: Tensor) -> Tensor:
        return self.proj_text(h)

    def __call__(
        self,
        memory: Tensor,
        queries: Tensor,
        memory_mask: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> List[Tensor]:
        """Run all layers; returns one (B, q, hidden) output per layer."""
        b = memory.shape[0]
        q, d = queries.shape
        if d != self.hidden:
            raise ValueError(f"query width {d} does not match decoder width {self.hidden}")
        qpos = queries.reshape(1, q, d)
        x = ops.add(qpos, np.zeros((b, 1, 1), dtype=queries.dtype))
        outputs = []
        for layer in self.layers:
            x = layer(x, memory, query_pos=qpos, memory_mask=memory_mask, rng=rng)
            outputs.append(x)
        return outputs


class QueryBank(Module):
    """One learned (q, d) query table per task, present in both decoder modes."""

    def __init__(self, query_counts: Dict[str, int], hidden: int, rng: np.random.Generator) -> None:
        super().__init__()
        for task, count in query_counts.items():
            if count < 1:
                raise ValueError(f"task {task!r} needs at least one query")
            self.register_parameter(task, Tensor(rng.normal(0.0, 0.02, size=(count, hidden)), requires_grad=True))

    def __getitem__(self, task: str) -> Tensor:
        if task not in self._params:
            raise KeyError(f"no query table for task {task!r}")
        return self._params[task]


class UnifiedDecoder(Module):
    def __init__(
        self,
        tasks: Sequence[str],
        query_counts: Dict[str, int],
        mode: str,
        image_width: int,
        text_width: int,
        hidden: int,
        layers: int,
        num_heads: int,
        ffn_dim: int,
        dropout: float,
        rng: np.random.Generator,
    ) -> None:
        super().__init__()
        if mode not in (SHARED, SEPARATE):
            raise ValueError(f"decoder mode must be {SHARED!r} or {SEPARATE!r}")
        missing = [t for t in tasks if t not in query_counts]
        if missing:
            raise ValueError(f"missing query counts for tasks {missing}")
        self.mode = mode
        self.task_list = list(tasks)

        def make_stack() -> DecoderStack:
            return DecoderStack(image_width, text_width, hidden, layers, num_heads, ffn_dim, dropout, rng)

        if mode == SHARED:
            self.stacks = ModuleDict({SHARED: make_stack()})
        else:
            self.stacks = ModuleDict({t: make_stack() for t in tasks})
        self.queries = QueryBank({t: query_counts[t] for t in tasks}, hidden, rng)

    def select_decoder(self, task_id: str) -> DecoderStack:
        if task_id not in self.task_list:
            raise KeyError(f"unknown task {task_id!r}")
        return self.stacks[SHARED] if self.mode == SHARED else self.stacks[task_id]

    def stack_parameter_count(self) -> int:
        first = next(iter(self.stacks.items()))[1]
        return first.num_parameters()

    def decode(
        self,
        memory: Tensor,
        task_id: str,
        memory_mask: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> List[Tensor]:
        stack = self.select_decoder(task_id)
        return stack(memory, self.queries[task_id], memory_mask=memory_mask, rng=rng)
