"""Segmentation heads, from the fixed point-wise baseline to the fully
decoupled mask/class formulation.

Five selectable variants:

* ``fixed``                — point-wise projection, frozen identity class mixing
* ``learnable_cls``        — learnable 1x1x1 class-mixing convolution
* ``transformer_cls``      — class embeddings from query/feature attention
* ``transformer_cls_mask`` — mask and class embeddings both query-driven
* ``decoupled``            — class-agnostic binary masks + per-query labels

Each head consumes one sample's feature map (C, D, H, W).  Coupled
variants emit per-voxel probabilities over the semantic channels (the
harness includes background as channel 0); the decoupled head emits raw
mask logits and (K+1)-way class logits, with "no object" last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import GROUP_CNN, GROUP_TRANS, Conv3d, Layer, LayerNorm, Linear, MLP
from .tensor import Tensor

MEMORY_MAX_EXTENT = 8

HEAD_VARIANTS = ("fixed", "learnable_cls", "transformer_cls",
                 "transformer_cls_mask", "decoupled")


@dataclass
class HeadOutput:
    """Per-sample head result; population depends on the variant."""

    semantic_probs: Tensor | None = None  # (n_cls, D, H, W) coupled variants
    mask_logits: Tensor | None = None     # (N_q, D, H, W) mask-emitting variants
    class_logits: Tensor | None = None    # (N_q, K+1) decoupled
    class_matrix: Tensor | None = None    # (N_q, n_cls) transformer variants
    mask_matrix: Tensor | None = None     # (N_q, C) mask-embedding variants
    queries: Tensor | None = None         # refined queries for propagation


class QuerySet(Layer):
    """Learnable content + positional embeddings shared across stages."""

    def __init__(self, rng, n_queries: int, embed_dim: int, dtype=np.float32):
        super().__init__()
        self.n_queries = n_queries
        self.embed_dim = embed_dim
        s = 1.0 / np.sqrt(embed_dim)
        self.content = self.param(
            "content", (rng.standard_normal((n_queries, embed_dim)) * s).astype(dtype),
            GROUP_TRANS, decay=False)
        self.pos = self.param(
            "pos", (rng.standard_normal((n_queries, embed_dim)) * s).astype(dtype),
            GROUP_TRANS, decay=False)


def attention_mask_additive(allowed: np.ndarray | None, n_queries: int,
                            n_positions: int, dtype) -> np.ndarray | None:
    """Boolean mask -> additive logits; all-false rows fall back to all-true."""
    if allowed is None:
        return None
    if allowed.shape != (n_queries, n_positions):
        raise DimensionError(
            f"attention mask {allowed.shape} != ({n_queries}, {n_positions})")
    allowed = allowed.astype(bool).copy()
    dead = ~allowed.any(axis=1)
    if dead.any():
        allowed[dead] = True
    add = np.where(allowed, 0.0, -np.inf).astype(dtype)
    return add


class Attention(Layer):
    """Multi-head scaled dot-product attention with additive masking."""

    def __init__(self, rng, embed_dim: int, n_heads: int, dtype=np.float32):
        super().__init__()
        if embed_dim % n_heads:
            raise DimensionError(f"embed dim {embed_dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = embed_dim // n_heads
        self.wq = self.child("wq", Linear(rng, embed_dim, embed_dim, dtype=dtype))
        self.wk = self.child("wk", Linear(rng, embed_dim, embed_dim, dtype=dtype))
        self.wv = self.child("wv", Linear(rng, embed_dim, embed_dim, dtype=dtype))
        self.wo = self.child("wo", Linear(rng, embed_dim, embed_dim, dtype=dtype))

    def forward(self, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                additive: np.ndarray | None = None) -> Tensor:
        q = self.wq.forward(q_in)
        k = self.wk.forward(k_in)
        v = self.wv.forward(v_in)
        scale = 1.0 / np.sqrt(self.head_dim)
        add_t = None if additive is None else Tensor(additive)
        outs = []
        for h in range(self.n_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = T.slice_axis(q, 1, lo, hi)
            kh = T.slice_axis(k, 1, lo, hi)
            vh = T.slice_axis(v, 1, lo, hi)
            logits = T.scale(T.matmul(qh, T.transpose(kh, (1, 0))), scale)
            if add_t is not None:
                logits = T.add(logits, add_t)
            outs.append(T.matmul(T.softmax(logits, 1), vh))
        return self.wo.forward(T.concat(outs, 1))


class TransformerBlock(Layer):
    """Masked cross-attention -> self-attention -> FFN, post-norm residuals."""

    def __init__(self, rng, embed_dim: int, n_heads: int, dtype=np.float32):
        super().__init__()
        self.cross = self.child("cross", Attention(rng, embed_dim, n_heads, dtype))
        self.self_attn = self.child("self_attn", Attention(rng, embed_dim, n_heads, dtype))
        self.norm1 = self.child("norm1", LayerNorm(embed_dim, dtype=dtype))
        self.norm2 = self.child("norm2", LayerNorm(embed_dim, dtype=dtype))
        self.norm3 = self.child("norm3", LayerNorm(embed_dim, dtype=dtype))
        self.ffn = self.child("ffn", MLP(rng, embed_dim, embed_dim,
                                         d_hidden=2 * embed_dim, dtype=dtype))

    def forward(self, queries: Tensor, query_pos: Tensor | None, memory: Tensor,
                attn_mask: np.ndarray | None = None) -> Tensor:
        n_q, t_n = queries.shape[0], memory.shape[0]
        additive = attention_mask_additive(attn_mask, n_q, t_n, queries.dtype)
        withpos = queries if query_pos is None else T.add(queries, query_pos)
        x = self.norm1.forward(
            T.add(queries, self.cross.forward(withpos, memory, memory, additive)))
        xpos = x if query_pos is None else T.add(x, query_pos)
        x = self.norm2.forward(T.add(x, self.self_attn.forward(xpos, xpos, x)))
        return self.norm3.forward(T.add(x, self.ffn.forward(x)))


class MemoryProjector(Layer):
    """Pool a feature map to at most 8^3 positions, project to embed width."""

    def __init__(self, rng, in_channels: int, embed_dim: int, dtype=np.float32):
        super().__init__()
        self.embed_dim = embed_dim
        self.proj = self.child("proj", Conv3d(rng, in_channels, embed_dim, kernel=1,
                                              group=GROUP_TRANS, dtype=dtype))

    @staticmethod
    def pooled_shape(extents) -> tuple[int, ...]:
        return tuple(min(e, MEMORY_MAX_EXTENT) for e in extents)

    def forward(self, feat: Tensor) -> tuple[Tensor, tuple[int, int, int]]:
        c, d, h, w = feat.shape
        factors = tuple(-(-e // MEMORY_MAX_EXTENT) for e in (d, h, w))
        if any(e % f for e, f in zip((d, h, w), factors)):
            raise DimensionError(f"extents {(d, h, w)} not poolable to "
                                 f"<= {MEMORY_MAX_EXTENT}")
        x = T.reshape(feat, (1, c, d, h, w))
        if factors != (1, 1, 1):
            x = T.avg_pool3d(x, factors)
        x = self.proj.forward(x)
        grid = x.shape[2:]
        mem = T.transpose(T.reshape(x, (self.embed_dim, int(np.prod(grid)))), (1, 0))
        return mem, grid


class EmbeddingBranch(Layer):
    """Lightweight 2-layer MLP emitting one embedding row per query."""

    def __init__(self, rng, embed_dim: int, out_dim: int, dtype=np.float32):
        super().__init__()
        self.mlp = self.child("mlp", MLP(rng, embed_dim, out_dim, dtype=dtype))

    def forward(self, queries: Tensor) -> Tensor:
        return self.mlp.forward(queries)


def _flatten_spatial(feat: Tensor) -> Tensor:
    c = feat.shape[0]
    return T.reshape(feat, (c, int(np.prod(feat.shape[1:]))))


def _mix_channels(matrix: Tensor, maps_2d: Tensor) -> Tensor:
    """scores[c, v] = sum_k matrix[k, c] * maps[k, v]."""
    return T.matmul(T.transpose(matrix, (1, 0)), maps_2d)


# ---------------------------------------------------------------------------
# variant (b): fixed identity class embedding
# ---------------------------------------------------------------------------

class FixedIdentityHead(Layer):
    variant = "fixed"

    def __init__(self, rng, in_channels: int, n_cls: int, dtype=np.float32):
        super().__init__()
        self.n_cls = n_cls
        self.mask_conv = self.child("mask_conv",
                                    Conv3d(rng, in_channels, n_cls, kernel=1,
                                           group=GROUP_CNN, dtype=dtype))
        # identity class mixing, materialized so the learnable variant can be
        # checked against it under frozen-identity parameters
        self.i_cls = Tensor(np.eye(n_cls, dtype=dtype).reshape(n_cls, n_cls, 1, 1, 1))

    def forward(self, feat: Tensor) -> HeadOutput:
        x = T.reshape(feat, (1,) + feat.shape)
        logits = self.mask_conv.forward(x)
        mixed = T.conv3d(logits, self.i_cls)
        probs = T.softmax(T.reshape(mixed, mixed.shape[1:]), axis=0)
        return HeadOutput(semantic_probs=probs,
                          class_matrix=Tensor(np.eye(self.n_cls, dtype=feat.dtype)))


# ---------------------------------------------------------------------------
# variant (c): learnable class embedding via point-wise convolution
# ---------------------------------------------------------------------------

class LearnableClsHead(Layer):
    variant = "learnable_cls"

    def __init__(self, rng, in_channels: int, n_cls: int, dtype=np.float32):
        super().__init__()
        self.n_cls = n_cls
        self.mask_conv = self.child("mask_conv",
                                    Conv3d(rng, in_channels, n_cls, kernel=1,
                                           group=GROUP_CNN, dtype=dtype))
        self.cls_conv = self.child("cls_conv",
                                   Conv3d(rng, n_cls, n_cls, kernel=1,
                                          group=GROUP_CNN, dtype=dtype))
        # start as the identity mixing (variant (b) behaviour)
        self.cls_conv.w.data[:] = np.eye(n_cls, dtype=dtype).reshape(
            n_cls, n_cls, 1, 1, 1)

    def forward(self, feat: Tensor) -> HeadOutput:
        x = T.reshape(feat, (1,) + feat.shape)
        logits = self.mask_conv.forward(x)
        mixed = self.cls_conv.forward(logits)
        probs = T.softmax(T.reshape(mixed, mixed.shape[1:]), axis=0)
        # convention: class matrix rows index logit masks, columns classes,
        # i.e. the transpose of the conv weight layout
        cls_mat = T.transpose(T.reshape(self.cls_conv.w, (self.n_cls, self.n_cls)),
                              (1, 0))
        return HeadOutput(semantic_probs=probs, class_matrix=cls_mat)


# ---------------------------------------------------------------------------
# transformer-driven variants (d), (e), (f)
# ---------------------------------------------------------------------------

class QueryHeadCore(Layer):
    """Shared machinery: pooled memory, query transformer, embedding branches."""

    def __init__(self, rng, in_channels: int, n_queries: int, embed_dim: int,
                 n_heads: int, class_out: int, mask_out: int | None,
                 dtype=np.float32):
        super().__init__()
        self.queries = self.child("queries", QuerySet(rng, n_queries, embed_dim, dtype))
        self.memory = self.child("memory",
                                 MemoryProjector(rng, in_channels, embed_dim, dtype))
        self.block = self.child("block", TransformerBlock(rng, embed_dim, n_heads, dtype))
        self.class_branch = self.child("class_branch",
                                       EmbeddingBranch(rng, embed_dim, class_out, dtype))
        self.mask_branch = None
        if mask_out is not None:
            self.mask_branch = self.child("mask_branch",
                                          EmbeddingBranch(rng, embed_dim, mask_out, dtype))

    def forward(self, feat: Tensor):
        mem, _ = self.memory.forward(feat)
        refined = self.block.forward(self.queries.content, self.queries.pos, mem)
        cls_mat = self.class_branch.forward(refined)
        mask_mat = self.mask_branch.forward(refined) if self.mask_branch else None
        return refined, cls_mat, mask_mat


class TransformerClsHead(Layer):
    """Variant (d): data-driven class embedding, point-wise mask embedding."""

    variant = "transformer_cls"

    def __init__(self, rng, in_channels: int, n_cls: int, embed_dim: int = 64,
                 n_heads: int = 4, dtype=np.float32):
        super().__init__()
        self.n_cls = n_cls
        self.mask_conv = self.child("mask_conv",
                                    Conv3d(rng, in_channels, n_cls, kernel=1,
                                           group=GROUP_CNN, dtype=dtype))
        # the class matrix must be square (n_cls x n_cls), so one query per class
        self.core = self.child("core", QueryHeadCore(rng, in_channels, n_cls,
                                                     embed_dim, n_heads,
                                                     class_out=n_cls, mask_out=None,
                                                     dtype=dtype))

    def forward(self, feat: Tensor) -> HeadOutput:
        x = T.reshape(feat, (1,) + feat.shape)
        logits = self.mask_conv.forward(x)
        maps_2d = _flatten_spatial(T.reshape(logits, logits.shape[1:]))
        refined, cls_mat, _ = self.core.forward(feat)
        mixed = _mix_channels(cls_mat, maps_2d)
        probs = T.softmax(T.reshape(mixed, (self.n_cls,) + feat.shape[1:]), axis=0)
        return HeadOutput(semantic_probs=probs, class_matrix=cls_mat, queries=refined)


class TransformerClsMaskHead(Layer):
    """Variant (e): both embeddings query-driven, still coupled softmax output."""

    variant = "transformer_cls_mask"

    def __init__(self, rng, in_channels: int, n_cls: int, n_queries: int | None = None,
                 embed_dim: int = 64, n_heads: int = 4, dtype=np.float32):
        super().__init__()
        self.n_cls = n_cls
        n_queries = n_cls if n_queries is None else n_queries
        self.core = self.child("core", QueryHeadCore(rng, in_channels, n_queries,
                                                     embed_dim, n_heads,
                                                     class_out=n_cls,
                                                     mask_out=in_channels,
                                                     dtype=dtype))

    def forward(self, feat: Tensor) -> HeadOutput:
        refined, cls_mat, mask_mat = self.core.forward(feat)
        maps_2d = T.matmul(mask_mat, _flatten_spatial(feat))  # (N_q, V)
        mixed = _mix_channels(cls_mat, maps_2d)
        probs = T.softmax(T.reshape(mixed, (self.n_cls,) + feat.shape[1:]), axis=0)
        n_q = maps_2d.shape[0]
        return HeadOutput(semantic_probs=probs,
                          mask_logits=T.reshape(maps_2d, (n_q,) + feat.shape[1:]),
                          class_matrix=cls_mat, mask_matrix=mask_mat, queries=refined)


class DecoupledHead(Layer):
    """Variant (f): class-agnostic binary masks plus (K+1)-way class logits."""

    variant = "decoupled"

    def __init__(self, rng, in_channels: int, n_cls: int, n_queries: int | None = None,
                 embed_dim: int = 64, n_heads: int = 4, dtype=np.float32):
        super().__init__()
        self.n_cls = n_cls
        n_queries = n_cls if n_queries is None else n_queries
        self.core = self.child("core", QueryHeadCore(rng, in_channels, n_queries,
                                                     embed_dim, n_heads,
                                                     class_out=n_cls + 1,
                                                     mask_out=in_channels,
                                                     dtype=dtype))

    def forward(self, feat: Tensor) -> HeadOutput:
        refined, cls_logits, mask_mat = self.core.forward(feat)
        maps_2d = T.matmul(mask_mat, _flatten_spatial(feat))
        n_q = maps_2d.shape[0]
        return HeadOutput(mask_logits=T.reshape(maps_2d, (n_q,) + feat.shape[1:]),
                          class_logits=cls_logits, class_matrix=cls_logits,
                          mask_matrix=mask_mat, queries=refined)


def build_head(variant: str, rng, in_channels: int, n_cls: int,
               n_queries: int | None = None, embed_dim: int = 64,
               n_heads: int = 4, dtype=np.float32) -> Layer:
    if variant == "fixed":
        return FixedIdentityHead(rng, in_channels, n_cls, dtype)
    if variant == "learnable_cls":
        return LearnableClsHead(rng, in_channels, n_cls, dtype)
    if variant == "transformer_cls":
        return TransformerClsHead(rng, in_channels, n_cls, embed_dim, n_heads, dtype)
    if variant == "transformer_cls_mask":
        return TransformerClsMaskHead(rng, in_channels, n_cls, n_queries,
                                      embed_dim, n_heads, dtype)
    if variant == "decoupled":
        return DecoupledHead(rng, in_channels, n_cls, n_queries, embed_dim,
                             n_heads, dtype)
    raise DimensionError(f"unknown head variant {variant!r}")
