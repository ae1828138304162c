"""Deformable full-scale fusion: references, attention semantics, gradients."""

import numpy as np
import pytest

from voxseg import tensor as T
from voxseg.errors import DimensionError
from voxseg.fsad import (FsadAttention, FsadTransformer, SamplingSpec,
                         attention_buffer_elements, make_reference_points)

E_DIM = 8
SPEC2 = SamplingSpec(points_k=2, query_levels=1, heads=2)


def linear_fields(extents, e_dim, rng):
    """Globally affine per-channel fields: trilinear sampling of these is
    differentiable everywhere, so FD gradchecks are clean."""
    values = []
    for (d, h, w) in extents:
        gd, gh, gw = np.meshgrid(np.arange(d), np.arange(h), np.arange(w),
                                 indexing="ij")
        coef = rng.standard_normal((e_dim, 4))
        vol = (coef[:, 0, None, None, None]
               + coef[:, 1, None, None, None] * gd
               + coef[:, 2, None, None, None] * gh
               + coef[:, 3, None, None, None] * gw)
        values.append(T.tensor(vol, dtype=np.float64))
    return values


class TestReferencePoints:
    def test_single_voxel_center(self):
        refs = make_reference_points([(1, 1, 1)])[0]
        assert np.array_equal(refs, [[0.5, 0.5, 0.5]])

    def test_two_cubed(self):
        refs = make_reference_points([(2, 2, 2)])[0]
        assert refs.shape == (8, 3)
        assert set(np.unique(refs)) == {0.25, 0.75}

    def test_refinement_consistency(self):
        coarse, fine = make_reference_points([(2, 2, 2), (4, 4, 4)])
        fine = fine.reshape(4, 4, 4, 3)
        for idx, ref in enumerate(coarse):
            d, h, w = np.unravel_index(idx, (2, 2, 2))
            children = fine[2 * d:2 * d + 2, 2 * h:2 * h + 2, 2 * w:2 * w + 2]
            assert np.abs(children.reshape(-1, 3).mean(axis=0) - ref).max() < 1e-12


class TestAttentionBuffer:
    def test_formula(self):
        shapes = [(4, 4, 4), (2, 2, 2)]
        spec = SamplingSpec(points_k=3, query_levels=1, heads=2)
        deform, dense = attention_buffer_elements(shapes, spec)
        assert deform == 8 * 2 * 2 * 3
        assert dense == 8 * (64 + 8) * 2

    def test_default_config_under_one_percent(self):
        shapes = [(32 // 2 ** s,) * 3 for s in range(5)]
        deform, dense = attention_buffer_elements(shapes, SamplingSpec())
        assert deform / dense < 0.01


def make_attention(extents, spec, seed=0, dtype=np.float64):
    return FsadAttention(np.random.default_rng(seed), E_DIM, extents, spec, dtype)


class TestFsadAttention:
    def test_weights_sum_to_one(self, rng):
        spec = SamplingSpec(points_k=3, query_levels=1, heads=2)
        attn = make_attention([(4, 4, 4), (2, 2, 2)], spec)
        # randomize away from the uniform zero-init
        attn.att_mlp.fc2.w.data[:] = rng.standard_normal(attn.att_mlp.fc2.w.shape)
        attn.att_mlp.fc2.b.data[:] = rng.standard_normal(attn.att_mlp.fc2.b.shape)
        tokens = T.tensor(rng.standard_normal((10, E_DIM)), dtype=np.float64)
        w = attn.attention_weights(tokens).data
        sums = w.reshape(10, 2, -1).sum(axis=2)
        assert np.abs(sums - 1.0).max() < 1e-6

    def test_zero_offsets_one_hot_weights_collapse(self, rng):
        from test_tensor_ops import corner_weight_oracle
        extents = [(4, 4, 4), (2, 2, 2)]
        attn = make_attention(extents, SPEC2, seed=1)
        # saturate weight of (level 1, point 0) for every head
        bias = attn.att_mlp.fc2.b.data.reshape(SPEC2.heads, 2, SPEC2.points_k)
        bias[:, 1, 0] = 400.0
        refs = make_reference_points([(2, 2, 2)])[0]
        tokens = T.tensor(rng.standard_normal((8, E_DIM)), dtype=np.float64)
        values = [T.tensor(rng.standard_normal((E_DIM,) + e), dtype=np.float64)
                  for e in extents]
        _, heads = attn.forward(tokens, refs, values, return_heads=True)
        # expected: per-head slice of value level 1 sampled at the references
        n, hd = 2, E_DIM // 2
        a1, b1 = 2 / 1, -0.5 / 1  # fraction -> grid map for extent 2
        grid_refs = refs * a1 + b1
        for h in range(n):
            vslice = values[1].data[h * hd:(h + 1) * hd]
            expect = corner_weight_oracle(vslice, grid_refs)
            assert np.abs(heads[h].data - expect).max() < 1e-10

    def test_uniform_weights_constant_fields_collapse(self, rng):
        extents = [(4, 4, 4), (2, 2, 2)]
        attn = make_attention(extents, SPEC2, seed=2)
        attn.out_proj.w.data[:] = rng.standard_normal(attn.out_proj.w.shape)
        consts = [rng.standard_normal(E_DIM) for _ in extents]
        values = [T.tensor(np.broadcast_to(c[:, None, None, None],
                                           (E_DIM,) + e).copy(), dtype=np.float64)
                  for c, e in zip(consts, extents)]
        refs = make_reference_points([(2, 2, 2)])[0]
        tokens = T.tensor(rng.standard_normal((8, E_DIM)), dtype=np.float64)
        out = attn.forward(tokens, refs, values).data
        mean_vec = (consts[0] + consts[1]) / 2.0
        expect = mean_vec @ attn.out_proj.w.data + attn.out_proj.b.data
        assert np.abs(out - expect[None, :]).max() < 1e-10

    def test_enumeration_oracle(self, rng):
        from test_tensor_ops import corner_weight_oracle
        extents = [(3, 4, 3), (2, 2, 2)]
        attn = make_attention(extents, SPEC2, seed=3)
        for lin in (attn.off_mlp.fc2, attn.att_mlp.fc2, attn.out_proj):
            lin.w.data[:] = 0.3 * rng.standard_normal(lin.w.shape)
            lin.b.data[:] = 0.3 * rng.standard_normal(lin.b.shape)
        tokens_np = rng.standard_normal((5, E_DIM))
        refs = rng.uniform(0.2, 0.8, (5, 3))
        values = [T.tensor(rng.standard_normal((E_DIM,) + e), dtype=np.float64)
                  for e in extents]
        out = attn.forward(T.tensor(tokens_np, dtype=np.float64), refs, values).data

        # independent loop over (head, level, point)
        offs = attn.sampling_offsets(T.tensor(tokens_np, dtype=np.float64)).data
        wts = attn.attention_weights(T.tensor(tokens_np, dtype=np.float64)).data
        hd = E_DIM // SPEC2.heads
        per_head = []
        for h in range(SPEC2.heads):
            acc = np.zeros((5, hd))
            for s, ext in enumerate(extents):
                scale = attn._params[f"offset_scale{s}"].tensor.data[0]
                a = np.array([n / (n - 1) for n in ext])
                b = np.array([-0.5 / (n - 1) for n in ext])
                for k in range(SPEC2.points_k):
                    loc = refs + offs[:, h, s, k, :] * scale
                    grid = loc * a + b
                    sampled = corner_weight_oracle(
                        values[s].data[h * hd:(h + 1) * hd], grid)
                    acc += wts[:, h, s, k][:, None] * sampled
            per_head.append(acc)
        expect = np.concatenate(per_head, axis=1) @ attn.out_proj.w.data \
            + attn.out_proj.b.data
        assert np.abs(out - expect).max() < 1e-10

    def test_value_level_permutation_consistency(self, rng):
        extents = [(3, 3, 3), (2, 2, 2)]
        attn = make_attention(extents, SPEC2, seed=4)
        for lin in (attn.off_mlp.fc2, attn.att_mlp.fc2, attn.out_proj):
            lin.w.data[:] = 0.3 * rng.standard_normal(lin.w.shape)
            lin.b.data[:] = 0.3 * rng.standard_normal(lin.b.shape)
        tokens = T.tensor(rng.standard_normal((4, E_DIM)), dtype=np.float64)
        refs = rng.uniform(0.2, 0.8, (4, 3))
        values = [T.tensor(rng.standard_normal((E_DIM,) + e), dtype=np.float64)
                  for e in extents]
        base = attn.forward(tokens, refs, values).data

        swapped = make_attention(extents[::-1], SPEC2, seed=4)
        for tgt, src in ((swapped.off_mlp.fc2, attn.off_mlp.fc2),
                         (swapped.att_mlp.fc2, attn.att_mlp.fc2)):
            per = 3 if tgt is swapped.off_mlp.fc2 else 1
            w = src.w.data.reshape(E_DIM, SPEC2.heads, 2, SPEC2.points_k * per)
            bb = src.b.data.reshape(SPEC2.heads, 2, SPEC2.points_k * per)
            tgt.w.data[:] = w[:, :, ::-1, :].reshape(tgt.w.shape)
            tgt.b.data[:] = bb[:, ::-1, :].reshape(tgt.b.shape)
        for lin_t, lin_s in ((swapped.off_mlp.fc1, attn.off_mlp.fc1),
                             (swapped.att_mlp.fc1, attn.att_mlp.fc1),
                             (swapped.out_proj, attn.out_proj)):
            lin_t.w.data[:] = lin_s.w.data
            lin_t.b.data[:] = lin_s.b.data
        swapped._params["offset_scale0"].tensor.data[:] = \
            attn._params["offset_scale1"].tensor.data
        swapped._params["offset_scale1"].tensor.data[:] = \
            attn._params["offset_scale0"].tensor.data
        out = swapped.forward(tokens, refs, values[::-1]).data
        assert np.abs(out - base).max() < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_offset_parameter_gradients(self, seed):
        rng = np.random.default_rng(seed)
        extents = [(4, 4, 4), (2, 2, 2)]
        attn = make_attention(extents, SPEC2, seed=seed)
        attn.att_mlp.fc2.w.data[:] = 0.3 * rng.standard_normal(attn.att_mlp.fc2.w.shape)
        attn.out_proj.w.data[:] = rng.standard_normal(attn.out_proj.w.shape)
        values = linear_fields(extents, E_DIM, rng)
        tokens = T.tensor(rng.standard_normal((4, E_DIM)), dtype=np.float64)
        refs = rng.uniform(0.3, 0.7, (4, 3))
        w0 = T.tensor(0.1 * rng.standard_normal(attn.off_mlp.fc2.w.shape),
                      dtype=np.float64)
        b0 = T.tensor(0.05 * rng.standard_normal(attn.off_mlp.fc2.b.shape),
                      dtype=np.float64)

        def fn(w2, b2):
            attn.off_mlp.fc2.w = w2
            attn.off_mlp.fc2.b = b2
            return attn.forward(tokens, refs, values)

        try:
            r = T.gradcheck(fn, [w0, b0], tol=1e-4, name="fsad_offsets")
        finally:
            attn.off_mlp.fc2.w = attn.off_mlp.fc2._params["weight"].tensor
            attn.off_mlp.fc2.b = attn.off_mlp.fc2._params["bias"].tensor
        assert r.passed, str(r)

    def test_full_composite_gradient(self):
        rng = np.random.default_rng(42)
        extents = [(3, 3, 3), (2, 2, 2)]
        attn = make_attention(extents, SPEC2, seed=9)
        for lin in (attn.off_mlp.fc2, attn.att_mlp.fc2, attn.out_proj):
            lin.w.data[:] = 0.2 * rng.standard_normal(lin.w.shape)
        values_np = [rng.standard_normal((E_DIM,) + e) for e in extents]
        refs = rng.uniform(0.25, 0.75, (4, 3))

        def fn(tokens, v0, v1):
            return attn.forward(tokens, refs, [v0, v1])

        # offsets stay tiny (zero-ish init), so samples sit strictly inside
        # voxel cells and the kink-free FD assumption holds
        r = T.gradcheck(fn, [T.tensor(rng.standard_normal((4, E_DIM)), dtype=np.float64),
                             T.tensor(values_np[0], dtype=np.float64),
                             T.tensor(values_np[1], dtype=np.float64)],
                        tol=1e-4, name="fsad_attention")
        assert r.passed, str(r)


class TestFsadTransformer:
    def _pyramid(self, rng, batch=1, dtype=np.float64):
        chans = [4, 8, 8]
        extents = [(8, 8, 8), (4, 4, 4), (2, 2, 2)]
        pyr = [T.tensor(rng.standard_normal((batch, c) + e), dtype=dtype)
               for c, e in zip(chans, extents)]
        return chans, extents, pyr

    def test_shapes_and_passthrough(self, rng):
        chans, extents, pyr = self._pyramid(rng, batch=2)
        spec = SamplingSpec(points_k=2, query_levels=2, heads=2)
        tr = FsadTransformer(np.random.default_rng(0), chans, extents, spec,
                             embed_dim=E_DIM, dtype=np.float64)
        fused = tr.forward(pyr)
        assert [f.shape for f in fused] == [p.shape for p in pyr]
        assert fused[0] is pyr[0]  # finest level passes through untouched
        for f in fused[1:]:
            assert np.isfinite(f.data).all()

    def test_query_level_isolation(self, rng):
        chans, extents, pyr = self._pyramid(rng)
        for lq in (2, 3):
            spec = SamplingSpec(points_k=2, query_levels=lq, heads=2)
            tr = FsadTransformer(np.random.default_rng(1), chans, extents, spec,
                                 embed_dim=E_DIM, dtype=np.float64)
            fused = tr.forward(pyr)
            changed = [not np.array_equal(f.data, p.data)
                       for f, p in zip(fused, pyr)]
            assert changed == [s >= len(chans) - lq for s in range(len(chans))]

    def test_zero_init_attention_contribution(self, rng):
        # fresh module: offsets zero, weights uniform, out_proj zero, so the
        # attention adds nothing and the block reduces to the LN/FFN path
        chans, extents, pyr = self._pyramid(rng)
        spec = SamplingSpec(points_k=2, query_levels=2, heads=2)
        tr = FsadTransformer(np.random.default_rng(2), chans, extents, spec,
                             embed_dim=E_DIM, dtype=np.float64)
        fused = tr.forward(pyr)

        s = 1  # a query level
        x = tr._children[f"query_proj{s}"].forward(pyr[s])
        flat = T.reshape(T.slice_axis(x, 0, 0, 1), (E_DIM, int(np.prod(extents[s]))))
        toks = T.transpose(flat, (1, 0))
        y = tr.norm1.forward(toks)  # attention contributes exactly zero
        z = tr.norm2.forward(T.add(y, tr.ffn.forward(y)))
        back = tr._children[f"back_proj{s}"].forward(
            T.reshape(T.transpose(z, (1, 0)), (1, E_DIM) + extents[s]))
        assert np.abs(fused[s].data - back.data).max() < 1e-12

    def test_extent_validation(self, rng):
        chans, extents, pyr = self._pyramid(rng)
        spec = SamplingSpec(points_k=2, query_levels=2, heads=2)
        tr = FsadTransformer(np.random.default_rng(3), chans, extents, spec,
                             embed_dim=E_DIM, dtype=np.float64)
        bad = [pyr[0], pyr[1], T.tensor(np.zeros((1, 8, 3, 3, 3)), dtype=np.float64)]
        with pytest.raises(DimensionError):
            tr.forward(bad)
