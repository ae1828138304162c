"""Masked multi-scale segmentation head.

One query set walks the decoder stages coarse to fine.  Each stage pools
its decoder map into transformer memory, refines the queries under an
attention mask derived from the previous (coarser) stage's predicted
masks, and emits mask/class predictions through branches shared across
stages.  Masking is a pure gate: with every position allowed, the output
is identical to the unmasked configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .errors import DimensionError
from .heads import (EmbeddingBranch, HeadOutput, MemoryProjector, QuerySet,
                    TransformerBlock, _flatten_spatial, _mix_channels)
from .layers import GROUP_TRANS, Conv3d, Layer
from .tensor import Tensor

MASK_PROB_THRESHOLD = 0.5  # sigmoid(logit) > 0.5, i.e. logit > 0


@dataclass
class StagePrediction:
    """Output of one stage; index 1 is the finest resolution."""

    stage_index: int
    output: HeadOutput
    queries: Tensor


def _grid_convention_coords(target_grid, source_extents, dtype) -> np.ndarray:
    """Voxel centers of the target grid, in the sampler's convention on the
    source grid (0 and 1 at first/last voxel centers)."""
    axes = []
    for n_t, n_s in zip(target_grid, source_extents):
        centers = (np.arange(n_t) + 0.5) / n_t  # volume-fraction coordinates
        if n_s > 1:
            axes.append((centers * n_s - 0.5) / (n_s - 1))
        else:
            axes.append(np.zeros(n_t))
    gd, gh, gw = np.meshgrid(*axes, indexing="ij")
    return np.stack([gd.reshape(-1), gh.reshape(-1), gw.reshape(-1)],
                    axis=1).astype(dtype)


def build_attention_mask(prev_mask_logits: np.ndarray,
                         target_grid: tuple[int, int, int]) -> np.ndarray:
    """Resample coarser-stage mask logits onto a pooled memory grid and
    threshold: a position is allowed iff its resampled logit is positive
    (sigmoid > 0.5).  Resampling happens on logits, preserving the decision
    boundary.  Returns bool (N_q, T)."""
    n_q = prev_mask_logits.shape[0]
    coords = _grid_convention_coords(target_grid, prev_mask_logits.shape[1:],
                                     prev_mask_logits.dtype)
    resampled = kernels.grid_sample_forward(
        np.ascontiguousarray(prev_mask_logits), coords)  # (T, N_q)
    return (resampled.T > 0.0).reshape(n_q, -1)


def assemble_semantic(class_probs: np.ndarray, mask_probs: np.ndarray,
                      background_threshold: float | None = MASK_PROB_THRESHOLD
                      ) -> np.ndarray:
    """Per-voxel semantic labels from decoupled predictions.

    score_c(v) = sum_i p_i(c) * m_i(v) over foreground classes c (the
    no-object column never competes).  With a threshold, voxels whose best
    score stays below it become background (label 0); with ``None`` the
    plain argmax label in 1..K is returned.
    """
    k = class_probs.shape[1] - 1
    scores = class_probs[:, :k].T @ mask_probs  # (K, V)
    labels = scores.argmax(axis=0).astype(np.int64) + 1
    if background_threshold is not None:
        labels[scores.max(axis=0) < background_threshold] = 0
    return labels


class MultiScaleHead(Layer):
    """Stage-wise query refinement over decoder maps (coarse -> fine).

    ``variant`` must emit per-query masks ("decoupled" or
    "transformer_cls_mask"); masked attention needs them as spatial priors.
    ``shared_queries=False`` gives every stage its own query set and
    disables propagation (the deep-supervision-only ablation).
    """

    def __init__(self, rng, stage_channels: list[int], n_cls: int,
                 n_queries: int | None = None, embed_dim: int = 64,
                 n_heads: int = 4, variant: str = "decoupled",
                 shared_queries: bool = True, masked_attention: bool = True,
                 dtype=np.float32):
        super().__init__()
        if variant not in ("decoupled", "transformer_cls_mask"):
            raise DimensionError(
                f"multi-scale head needs a mask-emitting variant, got {variant!r}")
        self.variant = variant
        self.n_cls = n_cls
        self.n_stages = len(stage_channels)
        self.shared_queries = shared_queries
        self.masked_attention = masked_attention
        self.embed_dim = embed_dim
        n_queries = n_cls if n_queries is None else n_queries

        if shared_queries:
            self.child("queries", QuerySet(rng, n_queries, embed_dim, dtype))
        else:
            for l in range(self.n_stages):
                self.child(f"queries{l}", QuerySet(rng, n_queries, embed_dim, dtype))

        for l, c_l in enumerate(stage_channels):
            self.child(f"memory{l}", MemoryProjector(rng, c_l, embed_dim, dtype))
            self.child(f"block{l}", TransformerBlock(rng, embed_dim, n_heads, dtype))
            self.child(f"feat_proj{l}", Conv3d(rng, c_l, embed_dim, kernel=1,
                                               group=GROUP_TRANS, dtype=dtype))
        class_out = n_cls + 1 if variant == "decoupled" else n_cls
        self.class_branch = self.child("class_branch",
                                       EmbeddingBranch(rng, embed_dim, class_out, dtype))
        self.mask_branch = self.child("mask_branch",
                                      EmbeddingBranch(rng, embed_dim, embed_dim, dtype))

    def _queries_for(self, stage: int) -> QuerySet:
        return self._children["queries" if self.shared_queries else f"queries{stage}"]

    def forward(self, decoder_maps: list[Tensor],
                force_unmasked: bool = False) -> list[StagePrediction]:
        """maps are per-sample (C, D, H, W), coarse -> fine; returns stage
        predictions in the same order (stage_index L..1)."""
        if len(decoder_maps) != self.n_stages:
            raise DimensionError(f"{len(decoder_maps)} maps for "
                                 f"{self.n_stages} configured stages")
        preds: list[StagePrediction] = []
        q = None
        prev_mask: np.ndarray | None = None
        for l, feat in enumerate(decoder_maps):
            qset = self._queries_for(l)
            if q is None or not self.shared_queries:
                q = qset.content
            mem, grid = self._children[f"memory{l}"].forward(feat)
            attn_mask = None
            if (self.masked_attention and not force_unmasked
                    and prev_mask is not None):
                attn_mask = build_attention_mask(prev_mask, grid)
            q = self._children[f"block{l}"].forward(q, qset.pos, mem, attn_mask)

            proj = self._children[f"feat_proj{l}"].forward(
                T.reshape(feat, (1,) + feat.shape))
            proj = T.reshape(proj, proj.shape[1:])
            mask_mat = self.mask_branch.forward(q)
            maps_2d = T.matmul(mask_mat, _flatten_spatial(proj))
            n_q = maps_2d.shape[0]
            mask_logits = T.reshape(maps_2d, (n_q,) + feat.shape[1:])

            cls = self.class_branch.forward(q)
            if self.variant == "decoupled":
                out = HeadOutput(mask_logits=mask_logits, class_logits=cls,
                                 class_matrix=cls, mask_matrix=mask_mat, queries=q)
            else:
                mixed = _mix_channels(cls, maps_2d)
                probs = T.softmax(T.reshape(mixed, (self.n_cls,) + feat.shape[1:]),
                                  axis=0)
                out = HeadOutput(semantic_probs=probs, mask_logits=mask_logits,
                                 class_matrix=cls, mask_matrix=mask_mat, queries=q)
            preds.append(StagePrediction(self.n_stages - l, out, q))
            prev_mask = mask_logits.data
        return preds
