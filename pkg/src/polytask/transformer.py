"""Attention primitives and encoder/decoder layers.

All layers operate on batched sequences shaped (B, L, D). Sublayers use the
post-norm ordering: x = LayerNorm(x + Dropout(sublayer(x))). Key masks are
boolean arrays (B, L) where True marks an attendable position; masked keys get
an additive -inf before the softmax so their weight is exactly zero.
"""
from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from .autodiff import Tensor, ops
from .nn import LayerNorm, Linear, Module


def positional_encoding_2d(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal grid encoding, flattened row-major to (h*w, dim).

    The first dim/2 channels encode the row position, the second half the
    column position; within each half sine and cosine channels interleave, so
    position (0, 0) reads 0 on sine channels and 1 on cosine channels.
    """
    if dim % 4 != 0:
        raise ValueError(f"2-d positional encoding needs dim divisible by 4, got {dim}")
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(half // 2) / half))
    out = np.zeros((h, w, dim))
    rows = np.arange(h)[:, None] * freqs[None, :]
    cols = np.arange(w)[:, None] * freqs[None, :]
    out[:, :, 0:half:2] = np.sin(rows)[:, None, :]
    out[:, :, 1:half:2] = np.cos(rows)[:, None, :]
    out[:, :, half::2] = np.sin(cols)[None, :, :]
    out[:, :, half + 1 :: 2] = np.cos(cols)[None, :, :]
    return out.reshape(h * w, dim)


def key_mask_bias(mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    """Turn a boolean (B, Lk) validity mask into an additive (B,1,1,Lk) bias."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention received a fully masked key set")
    bias = np.where(mask, 0.0, -np.inf)
    return bias[:, None, None, :]


class MultiHeadAttention(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator) -> None:
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"width {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.w_q = Linear(dim, dim, rng)
        self.w_k = Linear(dim, dim, rng)
        self.w_v = Linear(dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)

    def _split(self, x: Tensor, b: int, l: int) -> Tensor:
        return x.reshape(b, l, self.num_heads, self.head_dim).transpose((0, 2, 1, 3))

    def __call__(
        self,
        queries: Tensor,
        keys: Tensor,
        values: Tensor,
        key_mask: Optional[np.ndarray] = None,
    ) -> Tuple[Tensor, Tensor]:
        """Returns (output (B, Lq, D), attention weights (B, heads, Lq, Lk))."""
        if queries.shape[-1] != self.dim or keys.shape[-1] != self.dim:
            raise ValueError(
                f"attention width mismatch: got {queries.shape[-1]}/{keys.shape[-1]}, expected {self.dim}"
            )
        b, lq = queries.shape[0], queries.shape[1]
        lk = keys.shape[1]
        if lk == 0:
            raise ValueError("attention over an empty key sequence")
        q = self._split(self.w_q(queries), b, lq)
        k = self._split(self.w_k(keys), b, lk)
        v = self._split(self.w_v(values), b, lk)
        scores = ops.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        bias = key_mask_bias(key_mask)
        if bias is not None:
            scores = ops.add(scores, bias.astype(scores.dtype))
        attn = ops.softmax(scores, axis=-1)
        out = ops.matmul(attn, v).transpose((0, 2, 1, 3)).reshape(b, lq, self.dim)
        return self.w_o(out), attn


class FeedForward(Module):
    """Position-wise two-layer network with relu, the encoder/decoder inner block."""

    def __init__(self, dim: int, ffn_dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        if ffn_dim <= 0:
            raise ValueError("feed-forward intermediate size must be positive")
        self.lin1 = Linear(dim, ffn_dim, rng)
        self.lin2 = Linear(ffn_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ops.relu(self.lin1(x)))


class EncoderLayer(Module):
    def __init__(self, dim: int, num_heads: int, ffn_dim: int, dropout: float, rng: np.random.Generator) -> None:
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.self_attn = MultiHeadAttention(dim, num_heads, rng)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.dropout = dropout

    def _drop(self, x: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
        return ops.dropout(x, self.dropout, rng, training=self.training)

    def __call__(self, x: Tensor, key_mask=None, rng: Optional[np.random.Generator] = None) -> Tensor:
        a, _ = self.self_attn(x, x, x, key_mask=key_mask)
        x = self.norm1(ops.add(x, self._drop(a, rng)))
        return self.norm2(ops.add(x, self._drop(self.ffn(x), rng)))


class DecoderLayer(Module):
    """Decoder layer without causal masking, for parallel set prediction.

    ``query_pos`` follows the DETR convention: it is added to the query and key
    projections of self-attention and to the query projection of
    cross-attention at every layer, never to the value path.
    """

    def __init__(self, dim: int, num_heads: int, ffn_dim: int, dropout: float, rng: np.random.Generator) -> None:
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.self_attn = MultiHeadAttention(dim, num_heads, rng)
        self.cross_attn = MultiHeadAttention(dim, num_heads, rng)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.norm3 = LayerNorm(dim)
        self.dropout = dropout

    def _drop(self, x: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
        return ops.dropout(x, self.dropout, rng, training=self.training)

    def __call__(
        self,
        x: Tensor,
        memory: Tensor,
        query_pos: Optional[Tensor] = None,
        memory_mask: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        if memory.shape[1] == 0:
            raise ValueError("decoder cross-attention requires a non-empty encoded sequence")
        if memory.shape[-1] != x.shape[-1]:
            raise ValueError(f"decoder width mismatch: queries {x.shape[-1]}, memory {memory.shape[-1]}")
        qk = x if query_pos is None else ops.add(x, query_pos)
        a, _ = self.self_attn(qk, qk, x)
        x = self.norm1(ops.add(x, self._drop(a, rng)))
        q = x if query_pos is None else ops.add(x, query_pos)
        c, _ = self.cross_attn(q, memory, memory, key_mask=memory_mask)
        x = self.norm2(ops.add(x, self._drop(c, rng)))
        return self.norm3(ops.add(x, self._drop(self.ffn(x), rng)))
