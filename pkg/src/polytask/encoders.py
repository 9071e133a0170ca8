"""Per-modality encoders: conv+transformer for images, transformer for text.

Both encoders can prefix a learned per-task embedding token to their input
sequence and strip that position from the output, so downstream consumers
always see sequences whose length matches the raw input (H_v*W_v image
positions, S token positions).
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, ops
from .nn import Conv2d, Embedding, Linear, Module, ModuleList
from .transformer import EncoderLayer, positional_encoding_2d


class Vocabulary:
    """Closed word list; line number in the saved file is the token id."""

    CLS = 0
    PAD = 1
    UNK = 2
    SEP = 3
    _SPECIALS = ("[CLS]", "[PAD]", "[UNK]", "[SEP]")

    def __init__(self, tokens: Sequence[str]) -> None:
        if tuple(tokens[:4]) != self._SPECIALS:
            raise ValueError("vocabulary must start with [CLS] [PAD] [UNK] [SEP]")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "Vocabulary":
        return cls(list(cls._SPECIALS) + list(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self._ids.get(word, self.UNK)

    def tokenize(self, text: str) -> List[int]:
        return [self.CLS] + [self.id(w) for w in text.lower().split()]

    def tokenize_pair(self, first: str, second: str) -> List[int]:
        return (
            [self.CLS]
            + [self.id(w) for w in first.lower().split()]
            + [self.SEP]
            + [self.id(w) for w in second.lower().split()]
        )

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = Vocabulary.PAD) -> np.ndarray:
    """Right-pad id sequences into a (B, S) int array."""
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), pad_id, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = s
    return out


class ConvBackbone(Module):
    """Three stride-2 conv/relu stages; 64x64x3 images become 8x8 feature maps."""

    stride = 8

    def __init__(self, out_channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv1 = Conv2d(3, 16, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(16, 32, 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(32, out_channels, 3, rng, stride=2, padding=1)
        self.out_channels = out_channels

    def __call__(self, images: Tensor) -> Tensor:
        _, h, w, c = images.shape
        if c != 3:
            raise ValueError(f"expected 3 input channels, got {c}")
        if h % self.stride or w % self.stride:
            raise ValueError(f"image extents {h}x{w} must be multiples of {self.stride}")
        x = ops.relu(self.conv1(images))
        x = ops.relu(self.conv2(x))
        return ops.relu(self.conv3(x))


class ImageEncoder(Module):
    def __init__(
        self,
        tasks: Sequence[str],
        hidden: int,
        layers: int,
        num_heads: int,
        ffn_dim: int,
        dropout: float,
        rng: np.random.Generator,
        backbone_channels: int = 64,
    ) -> None:
        super().__init__()
        self.tasks = {t: i for i, t in enumerate(tasks)}
        self.hidden = hidden
        self.backbone = ConvBackbone(backbone_channels, rng)
        self.proj = Linear(backbone_channels, hidden, rng)
        self.layers = ModuleList(
            EncoderLayer(hidden, num_heads, ffn_dim, dropout, rng) for _ in range(layers)
        )
        self.task_embed = Embedding(len(self.tasks), hidden, rng)
        self._pos_cache = {}

    def _positional(self, h: int, w: int, dtype) -> np.ndarray:
        key = (h, w, np.dtype(dtype).str)
        if key not in self._pos_cache:
            self._pos_cache[key] = positional_encoding_2d(h, w, self.hidden).astype(dtype)
        return self._pos_cache[key]

    def __call__(
        self,
        images: np.ndarray,
        task_id: str,
        use_task_token: bool = True,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Encode (B, H, W, 3) images to hidden states (B, H/8 * W/8, hidden)."""
        if task_id not in self.tasks:
            raise KeyError(f"unknown task {task_id!r}")
        dtype = self.proj.weight.dtype
        feat = self.backbone(Tensor(np.asarray(images, dtype=dtype)))
        b, hv, wv, cb = feat.shape
        x = self.proj(feat.reshape(b, hv * wv, cb))
        x = ops.add(x, self._positional(hv, wv, dtype))
        if use_task_token:
            token = self.task_embed(np.full((b, 1), self.tasks[task_id], dtype=np.int64))
            x = ops.concat([token, x], axis=1)
        for layer in self.layers:
            x = layer(x, rng=rng)
        if use_task_token:
            x = ops.slice_(x, (slice(None), slice(1, None)))
        return x


class TextEncoder(Module):
    def __init__(
        self,
        tasks: Sequence[str],
        vocab_size: int,
        hidden: int,
        layers: int,
        num_heads: int,
        ffn_dim: int,
        dropout: float,
        rng: np.random.Generator,
        max_len: int = 48,
        pad_id: int = Vocabulary.PAD,
        cls_id: int = Vocabulary.CLS,
    ) -> None:
        super().__init__()
        self.tasks = {t: i for i, t in enumerate(tasks)}
        self.token_embed = Embedding(vocab_size, hidden, rng)
        self.pos_embed = Embedding(max_len, hidden, rng)
        # sentence-pair inputs mark everything after the first SEP as segment 1
        self.segment_embed = Embedding(2, hidden, rng)
        self.layers = ModuleList(
            EncoderLayer(hidden, num_heads, ffn_dim, dropout, rng) for _ in range(layers)
        )
        self.task_embed = Embedding(len(self.tasks), hidden, rng)
        self.max_len = max_len
        self.pad_id = pad_id
        self.cls_id = cls_id

    def __call__(
        self,
        tokens: np.ndarray,
        task_id: str,
        use_task_token: bool = True,
        cls_only: bool = True,
        rng: Optional[np.random.Generator] = None,
        valid_mask: Optional[np.ndarray] = None,
    ) -> Tuple[Tensor, np.ndarray]:
        """Encode (B, S) token ids; returns (states, validity mask).

        With cls_only the states have length 1 (the CLS position); otherwise
        length S. ``valid_mask`` overrides the PAD-derived mask when supplied.
        """
        if task_id not in self.tasks:
            raise KeyError(f"unknown task {task_id!r}")
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ValueError("tokens must be a non-empty (B, S) id array")
        if tokens.shape[1] > self.max_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds max {self.max_len}")
        if not (tokens[:, 0] == self.cls_id).all():
            raise ValueError("every sequence must begin with the CLS id")
        b, s = tokens.shape
        if valid_mask is None:
            valid_mask = tokens != self.pad_id
        segments = (np.cumsum(tokens == Vocabulary.SEP, axis=1) - (tokens == Vocabulary.SEP)).clip(0, 1)
        x = ops.add(self.token_embed(tokens), self.pos_embed(np.arange(s)))
        x = ops.add(x, self.segment_embed(segments))
        mask = valid_mask
        if use_task_token:
            token = self.task_embed(np.full((b, 1), self.tasks[task_id], dtype=np.int64))
            x = ops.concat([token, x], axis=1)
            mask = np.concatenate([np.ones((b, 1), dtype=bool), valid_mask], axis=1)
        for layer in self.layers:
            x = layer(x, key_mask=mask, rng=rng)
        if use_task_token:
            x = ops.slice_(x, (slice(None), slice(1, None)))
        if cls_only:
            return ops.slice_(x, (slice(None), slice(0, 1))), np.ones((b, 1), dtype=bool)
        return x, valid_mask
