"""Full-scale deformable feature fusion across the encoder pyramid.

Query tokens come from the coarsest pyramid levels; values span every
level.  Each token predicts, per head, K sampling offsets and softmax
weights for every value level, gathers trilinear samples at
reference + offset, and mixes them.  Offsets live in the shared
volume-fraction coordinate frame ([0,1]^3 across scales), so a sampling
point names the same anatomical location at every resolution.

Attention cost scales with T_q * H * L_v * K instead of T_q * T_v * H;
``attention_buffer_elements`` evaluates both counts analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import GROUP_TRANS, Conv3d, Layer, LayerNorm, Linear, MLP
from .tensor import Tensor


@dataclass
class SamplingSpec:
    points_k: int = 4
    query_levels: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.points_k < 1 or self.query_levels < 1 or self.heads < 1:
            raise DimensionError("sampling spec fields must be positive")


def make_reference_points(level_shapes) -> list[np.ndarray]:
    """Voxel-center anchors per level, volume-fraction convention.

    Voxel (d,h,w) of a D*H*W level maps to ((d+.5)/D, (h+.5)/H, (w+.5)/W);
    a coarse anchor therefore coincides with the mean of its 8 children at
    the next finer level.
    """
    refs = []
    for shape in level_shapes:
        if any(e < 1 for e in shape):
            raise DimensionError(f"bad level shape {shape}")
        axes = [(np.arange(n) + 0.5) / n for n in shape]
        gd, gh, gw = np.meshgrid(*axes, indexing="ij")
        refs.append(np.stack([gd.reshape(-1), gh.reshape(-1), gw.reshape(-1)],
                             axis=1))
    return refs


def _fraction_to_grid_const(extents, dtype):
    """Affine map u -> (u*n - 0.5)/(n - 1) per axis (grid-sampler convention)."""
    a = np.array([n / (n - 1) if n > 1 else 0.0 for n in extents], dtype=dtype)
    b = np.array([-0.5 / (n - 1) if n > 1 else 0.0 for n in extents], dtype=dtype)
    return a, b


def attention_buffer_elements(level_shapes, spec: SamplingSpec) -> tuple[int, int]:
    """(deformable, dense all-pairs) attention buffer element counts."""
    sizes = [int(np.prod(s)) for s in level_shapes]
    t_q = sum(sizes[-spec.query_levels:])
    t_v = sum(sizes)
    deformable = t_q * spec.heads * len(sizes) * spec.points_k
    dense = t_q * t_v * spec.heads
    return deformable, dense


class FsadAttention(Layer):
    """Deformable multi-scale attention over per-head value slices."""

    def __init__(self, rng, embed_dim: int, value_extents: list[tuple[int, int, int]],
                 spec: SamplingSpec, dtype=np.float32):
        super().__init__()
        if embed_dim % spec.heads:
            raise DimensionError(f"embed dim {embed_dim} not divisible by "
                                 f"{spec.heads} heads")
        self.spec = spec
        self.embed_dim = embed_dim
        self.head_dim = embed_dim // spec.heads
        self.n_levels = len(value_extents)
        self.value_extents = [tuple(e) for e in value_extents]
        out = spec.heads * self.n_levels * spec.points_k
        # zero-init final layers: offsets start at the reference points and
        # weights start uniform, so the first pass averages pooled values
        self.off_mlp = self.child("off_mlp", MLP(rng, embed_dim, out * 3,
                                                 zero_init_last=True, dtype=dtype))
        self.att_mlp = self.child("att_mlp", MLP(rng, embed_dim, out,
                                                 zero_init_last=True, dtype=dtype))
        self.out_proj = self.child("out_proj", Linear(rng, embed_dim, embed_dim,
                                                      zero_init=True, dtype=dtype))
        for s, ext in enumerate(self.value_extents):
            self.param(f"offset_scale{s}",
                       np.full(1, 2.0 / max(ext), dtype=dtype), GROUP_TRANS)

    def attention_weights(self, tokens: Tensor) -> Tensor:
        """(T, H, L_v, K) softmax-normalized over the (L_v, K) axis per head."""
        t_n = tokens.shape[0]
        h, l, k = self.spec.heads, self.n_levels, self.spec.points_k
        raw = self.att_mlp.forward(tokens)
        w = T.softmax(T.reshape(raw, (t_n * h, l * k)), axis=1)
        return T.reshape(w, (t_n, h, l, k))

    def sampling_offsets(self, tokens: Tensor) -> Tensor:
        """(T, H, L_v, K, 3) raw offsets in volume-fraction coordinates."""
        t_n = tokens.shape[0]
        h, l, k = self.spec.heads, self.n_levels, self.spec.points_k
        return T.reshape(self.off_mlp.forward(tokens), (t_n, h, l, k, 3))

    def forward(self, tokens: Tensor, refs: np.ndarray, values: list[Tensor],
                return_heads: bool = False):
        """tokens (T,E); refs (T,3) volume-fraction; values per level (E,d,h,w)."""
        if len(values) != self.n_levels:
            raise DimensionError(f"{len(values)} value levels, expected {self.n_levels}")
        t_n = tokens.shape[0]
        h_n, k_n = self.spec.heads, self.spec.points_k
        offsets = self.sampling_offsets(tokens)
        weights = self.attention_weights(tokens)

        head_acc: list[Tensor | None] = [None] * h_n
        for s, value in enumerate(values):
            ext = value.shape[1:]
            if tuple(ext) != self.value_extents[s]:
                raise DimensionError(f"value level {s} extents {ext} != "
                                     f"{self.value_extents[s]}")
            off_s = T.reshape(T.slice_axis(offsets, 2, s, s + 1), (t_n, h_n, k_n, 3))
            scale = T.broadcast_to(
                T.reshape(self._params[f"offset_scale{s}"].tensor, (1, 1, 1, 1)),
                (t_n, h_n, k_n, 3))
            ref_full = Tensor(np.ascontiguousarray(np.broadcast_to(
                refs[:, None, None, :], (t_n, h_n, k_n, 3))).astype(tokens.dtype))
            loc = T.add(T.mul(off_s, scale), ref_full)
            a, b = _fraction_to_grid_const(ext, tokens.dtype)
            grid = T.add(T.mul(loc, Tensor(np.broadcast_to(a, loc.shape).copy())),
                         Tensor(np.broadcast_to(b, loc.shape).copy()))
            for h in range(h_n):
                coords = T.reshape(T.slice_axis(grid, 1, h, h + 1), (t_n * k_n, 3))
                vslice = T.slice_axis(value, 0, h * self.head_dim,
                                      (h + 1) * self.head_dim)
                sampled = T.grid_sample_trilinear(vslice, coords)  # (T*K, hd)
                w_hk = T.reshape(T.slice_axis(
                    T.reshape(T.slice_axis(weights, 1, h, h + 1), (t_n, self.n_levels, k_n)),
                    1, s, s + 1), (t_n * k_n, 1))
                weighted = T.mul(sampled, T.broadcast_to(w_hk, sampled.shape))
                contrib = T.sum_axes(T.reshape(weighted, (t_n, k_n, self.head_dim)), (1,))
                head_acc[h] = contrib if head_acc[h] is None else T.add(head_acc[h], contrib)

        out = self.out_proj.forward(T.concat(head_acc, axis=1))
        if return_heads:
            return out, head_acc
        return out


class FsadTransformer(Layer):
    """Pyramid-fusion block: project, attend across scales, restore channels.

    The finest ``S - query_levels`` levels pass through unchanged; each
    query level is channel-projected to the embed width, refined by
    FSAD-Attention -> LN+residual -> FFN -> LN+residual (applied per query
    position), and projected back to its pyramid channel count.
    """

    def __init__(self, rng, level_channels: list[int],
                 level_extents: list[tuple[int, int, int]],
                 spec: SamplingSpec, embed_dim: int = 64, dtype=np.float32):
        super().__init__()
        if spec.query_levels > len(level_channels):
            raise DimensionError(f"{spec.query_levels} query levels but only "
                                 f"{len(level_channels)} pyramid levels")
        self.spec = spec
        self.embed_dim = embed_dim
        self.n_levels = len(level_channels)
        self.level_extents = [tuple(e) for e in level_extents]
        self.query_start = self.n_levels - spec.query_levels
        for s, c in enumerate(level_channels):
            self.child(f"value_proj{s}", Conv3d(rng, c, embed_dim, kernel=1,
                                                group=GROUP_TRANS, dtype=dtype))
        for s in range(self.query_start, self.n_levels):
            c = level_channels[s]
            self.child(f"query_proj{s}", Conv3d(rng, c, embed_dim, kernel=1,
                                                group=GROUP_TRANS, dtype=dtype))
            self.child(f"back_proj{s}", Conv3d(rng, embed_dim, c, kernel=1,
                                               group=GROUP_TRANS, dtype=dtype))
        self.attn = self.child("attn", FsadAttention(rng, embed_dim,
                                                     self.level_extents, spec, dtype))
        self.norm1 = self.child("norm1", LayerNorm(embed_dim, dtype=dtype))
        self.norm2 = self.child("norm2", LayerNorm(embed_dim, dtype=dtype))
        self.ffn = self.child("ffn", MLP(rng, embed_dim, embed_dim,
                                         d_hidden=2 * embed_dim, dtype=dtype))
        q_shapes = self.level_extents[self.query_start:]
        self._refs = np.concatenate(make_reference_points(q_shapes), axis=0)
        self._token_counts = [int(np.prod(s)) for s in q_shapes]

    def forward(self, pyramid: list[Tensor]) -> list[Tensor]:
        """pyramid: S levels (B,C_s,d,h,w); returns the fused pyramid."""
        if len(pyramid) != self.n_levels:
            raise DimensionError(f"pyramid has {len(pyramid)} levels, "
                                 f"expected {self.n_levels}")
        for s, feat in enumerate(pyramid):
            if tuple(feat.shape[2:]) != self.level_extents[s]:
                raise DimensionError(f"level {s} extents {feat.shape[2:]} != "
                                     f"configured {self.level_extents[s]}")
        b_n = pyramid[0].shape[0]
        e = self.embed_dim
        values_b = [self._children[f"value_proj{s}"].forward(pyramid[s])
                    for s in range(self.n_levels)]
        tokens_b = [self._children[f"query_proj{s}"].forward(pyramid[s])
                    for s in range(self.query_start, self.n_levels)]
        refs = self._refs.astype(pyramid[0].dtype)

        fused_rows: list[list[Tensor]] = [[] for _ in range(self.n_levels)]
        for b in range(b_n):
            values = [T.reshape(T.slice_axis(v, 0, b, b + 1), (e,) + self.level_extents[s])
                      for s, v in enumerate(values_b)]
            toks = []
            for i, tb in enumerate(tokens_b):
                ext = self.level_extents[self.query_start + i]
                flat = T.reshape(T.slice_axis(tb, 0, b, b + 1), (e, int(np.prod(ext))))
                toks.append(T.transpose(flat, (1, 0)))
            x = T.concat(toks, axis=0)
            y = self.norm1.forward(T.add(x, self.attn.forward(x, refs, values)))
            z = self.norm2.forward(T.add(y, self.ffn.forward(y)))

            start = 0
            for i, count in enumerate(self._token_counts):
                s = self.query_start + i
                ext = self.level_extents[s]
                rows = T.slice_axis(z, 0, start, start + count)
                feat = T.reshape(T.transpose(rows, (1, 0)), (1, e) + ext)
                fused_rows[s].append(self._children[f"back_proj{s}"].forward(feat))
                start += count
        fused = []
        for s in range(self.n_levels):
            if s < self.query_start:
                fused.append(pyramid[s])
            else:
                fused.append(T.concat(fused_rows[s], axis=0))
        return fused
