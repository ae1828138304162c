"""Head variants, the transformer block, and the constructive reductions."""

import numpy as np
import pytest

from voxseg import equivalence as E
from voxseg import tensor as T
from voxseg.heads import (Attention, DecoupledHead, FixedIdentityHead,
                          LearnableClsHead, MemoryProjector, TransformerBlock,
                          TransformerClsHead, TransformerClsMaskHead,
                          attention_mask_additive, build_head)
from voxseg.multiscale import assemble_semantic

C_IN, N_CLS, E_DIM, HEADS = 6, 4, 16, 2


def feat(rng, extent=8, c=C_IN, dtype=np.float64):
    return T.tensor(rng.standard_normal((c, extent, extent, extent)), dtype=dtype)


# =============================================================================
# fixed / learnable heads
# =============================================================================

class TestFixedHead:
    def test_zero_projection_gives_uniform(self):
        rng = np.random.default_rng(0)
        head = FixedIdentityHead(rng, C_IN, N_CLS, dtype=np.float64)
        head.mask_conv.w.data[:] = 0.0
        head.mask_conv.b.data[:] = 0.0
        out = head.forward(feat(rng)).semantic_probs.data
        assert np.abs(out - 1.0 / N_CLS).max() < 1e-12

    def test_probabilities_normalized(self):
        rng = np.random.default_rng(1)
        head = FixedIdentityHead(rng, C_IN, N_CLS, dtype=np.float64)
        out = head.forward(feat(rng)).semantic_probs.data
        assert np.abs(out.sum(axis=0) - 1.0).max() < 1e-6

    def test_equals_learnable_with_frozen_identity_bitwise(self):
        rng = np.random.default_rng(2)
        fixed = FixedIdentityHead(rng, C_IN, N_CLS, dtype=np.float64)
        learn = LearnableClsHead(np.random.default_rng(3), C_IN, N_CLS,
                                 dtype=np.float64)
        E.make_learnable_cls_equivalent(learn, fixed)
        x = feat(np.random.default_rng(4))
        a = fixed.forward(x).semantic_probs.data
        b = learn.forward(x).semantic_probs.data
        assert np.array_equal(a, b)


class TestLearnableClsHead:
    def test_permutation_matrix_permutes_channels(self):
        rng = np.random.default_rng(5)
        head = LearnableClsHead(rng, C_IN, N_CLS, dtype=np.float64)
        x = feat(rng)
        base = head.forward(x).semantic_probs.data
        perm = np.array([2, 0, 3, 1])
        pmat = np.zeros((N_CLS, N_CLS))
        pmat[np.arange(N_CLS), perm] = 1.0  # output class k reads logit mask perm[k]
        head.cls_conv.w.data[:] = pmat.reshape(N_CLS, N_CLS, 1, 1, 1)
        permuted = head.forward(x).semantic_probs.data
        assert np.abs(permuted - base[perm]).max() < 1e-12

    def test_matches_two_matmul_oracle(self):
        rng = np.random.default_rng(6)
        head = LearnableClsHead(rng, C_IN, N_CLS, dtype=np.float64)
        head.cls_conv.w.data[:] = rng.standard_normal(
            head.cls_conv.w.shape)
        head.cls_conv.b.data[:] = 0.0
        head.mask_conv.b.data[:] = 0.0
        x = feat(rng)
        got = head.forward(x).semantic_probs.data
        f2d = x.data.reshape(C_IN, -1)
        m_mask = head.mask_conv.w.data.reshape(N_CLS, C_IN)
        m_cls = head.cls_conv.w.data.reshape(N_CLS, N_CLS)  # (class, mask) layout
        logits = m_cls @ (m_mask @ f2d)
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        ref = (e / e.sum(axis=0, keepdims=True)).reshape(got.shape)
        assert np.abs(got - ref).max() < 1e-10


# =============================================================================
# attention masking semantics
# =============================================================================

class TestMaskedAttention:
    def _setup(self, seed=7):
        rng = np.random.default_rng(seed)
        attn = Attention(rng, E_DIM, HEADS, dtype=np.float64)
        q = T.tensor(rng.standard_normal((3, E_DIM)), dtype=np.float64)
        mem = T.tensor(rng.standard_normal((10, E_DIM)), dtype=np.float64)
        return attn, q, mem

    def test_all_true_equals_unmasked_exactly(self):
        attn, q, mem = self._setup()
        full = attention_mask_additive(np.ones((3, 10), dtype=bool), 3, 10, np.float64)
        a = attn.forward(q, mem, mem, full).data
        b = attn.forward(q, mem, mem, None).data
        assert np.array_equal(a, b)

    def test_one_hot_mask_selects_single_position(self):
        attn, q, mem = self._setup()
        allowed = np.zeros((3, 10), dtype=bool)
        targets = [4, 0, 9]
        for i, t in enumerate(targets):
            allowed[i, t] = True
        add = attention_mask_additive(allowed, 3, 10, np.float64)
        out = attn.forward(q, mem, mem, add).data
        v = attn.wv.forward(mem)
        ref = attn.wo.forward(T.tensor(v.data[targets], dtype=np.float64)).data
        assert np.abs(out - ref).max() < 1e-12

    def test_all_false_row_falls_back_to_unmasked(self):
        attn, q, mem = self._setup()
        allowed = np.ones((3, 10), dtype=bool)
        allowed[1, :] = False
        add = attention_mask_additive(allowed, 3, 10, np.float64)
        masked = attn.forward(q, mem, mem, add).data
        unmasked = attn.forward(q, mem, mem, None).data
        assert np.array_equal(masked[1], unmasked[1])

    def test_block_runs_with_mask_and_matches_unmasked_when_full(self):
        rng = np.random.default_rng(8)
        block = TransformerBlock(rng, E_DIM, HEADS, dtype=np.float64)
        q = T.tensor(rng.standard_normal((3, E_DIM)), dtype=np.float64)
        pos = T.tensor(rng.standard_normal((3, E_DIM)), dtype=np.float64)
        mem = T.tensor(rng.standard_normal((12, E_DIM)), dtype=np.float64)
        a = block.forward(q, pos, mem, np.ones((3, 12), dtype=bool)).data
        b = block.forward(q, pos, mem, None).data
        assert np.array_equal(a, b)


# =============================================================================
# transformer variants
# =============================================================================

class TestTransformerHeads:
    def test_cls_rows_normalized(self):
        rng = np.random.default_rng(9)
        head = TransformerClsHead(rng, C_IN, N_CLS, embed_dim=E_DIM, n_heads=HEADS,
                                  dtype=np.float64)
        out = head.forward(feat(rng)).semantic_probs.data
        assert np.abs(out.sum(axis=0) - 1.0).max() < 1e-6

    def test_cls_mask_rows_normalized(self):
        rng = np.random.default_rng(10)
        head = TransformerClsMaskHead(rng, C_IN, N_CLS, embed_dim=E_DIM,
                                      n_heads=HEADS, dtype=np.float64)
        out = head.forward(feat(rng))
        assert np.abs(out.semantic_probs.data.sum(axis=0) - 1.0).max() < 1e-6
        assert out.mask_logits.shape == (N_CLS, 8, 8, 8)

    def test_class_embedding_is_data_driven(self):
        rng = np.random.default_rng(11)
        head = TransformerClsHead(rng, C_IN, N_CLS, embed_dim=E_DIM, n_heads=HEADS,
                                  dtype=np.float64)
        m1 = head.forward(feat(np.random.default_rng(1))).class_matrix.data
        m2 = head.forward(feat(np.random.default_rng(2))).class_matrix.data
        assert np.abs(m1 - m2).max() > 0.0

    def test_decoupled_zero_mask_branch_gives_half_sigmoid(self):
        rng = np.random.default_rng(12)
        head = DecoupledHead(rng, C_IN, N_CLS, embed_dim=E_DIM, n_heads=HEADS,
                             dtype=np.float64)
        head.core.mask_branch.mlp.fc2.w.data[:] = 0.0
        head.core.mask_branch.mlp.fc2.b.data[:] = 0.0
        out = head.forward(feat(rng))
        assert np.abs(out.mask_logits.data).max() == 0.0
        assert np.abs(T.sigmoid(out.mask_logits).data - 0.5).max() == 0.0

    def test_decoupled_class_rows_normalized(self):
        rng = np.random.default_rng(13)
        head = DecoupledHead(rng, C_IN, N_CLS, embed_dim=E_DIM, n_heads=HEADS,
                             dtype=np.float64)
        out = head.forward(feat(rng))
        probs = T.softmax(out.class_logits, axis=1).data
        assert probs.shape == (N_CLS, N_CLS + 1)
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6

    def test_query_permutation_equivariance(self):
        rng = np.random.default_rng(14)
        head = DecoupledHead(rng, C_IN, N_CLS, embed_dim=E_DIM, n_heads=HEADS,
                             dtype=np.float64)
        x = feat(rng)
        base = head.forward(x)
        perm = np.array([3, 1, 0, 2])
        qs = head.core.queries
        qs.content.data[:] = qs.content.data[perm]
        qs.pos.data[:] = qs.pos.data[perm]
        permuted = head.forward(x)
        assert np.abs(permuted.mask_logits.data - base.mask_logits.data[perm]).max() < 1e-12
        assert np.abs(permuted.class_logits.data - base.class_logits.data[perm]).max() < 1e-12


class TestMemoryProjector:
    def test_pools_to_max_extent(self):
        rng = np.random.default_rng(15)
        proj = MemoryProjector(rng, C_IN, E_DIM, dtype=np.float64)
        mem, grid = proj.forward(feat(rng, extent=16))
        assert grid == (8, 8, 8)
        assert mem.shape == (512, E_DIM)

    def test_small_maps_not_pooled(self):
        rng = np.random.default_rng(16)
        proj = MemoryProjector(rng, C_IN, E_DIM, dtype=np.float64)
        mem, grid = proj.forward(feat(rng, extent=4))
        assert grid == (4, 4, 4)
        assert mem.shape == (64, E_DIM)


# =============================================================================
# the equivalence ladder (variants (c)-(f) reproduce (b)'s argmax)
# =============================================================================

class TestEquivalenceLadder:
    @pytest.fixture
    def reference(self):
        rng = np.random.default_rng(100)
        head = FixedIdentityHead(rng, C_IN, N_CLS, dtype=np.float64)
        head.mask_conv.b.data[:] = 0.0  # the baseline formulation is bias-free
        return head

    def _argmax_fixed(self, reference, x):
        return reference.forward(x).semantic_probs.data.argmax(axis=0)

    def test_learnable_cls_matches(self, reference):
        head = LearnableClsHead(np.random.default_rng(101), C_IN, N_CLS,
                                dtype=np.float64)
        E.make_learnable_cls_equivalent(head, reference)
        for seed in range(20):
            x = feat(np.random.default_rng(seed), extent=4)
            assert np.array_equal(head.forward(x).semantic_probs.data.argmax(axis=0),
                                  self._argmax_fixed(reference, x))

    def test_transformer_cls_matches(self, reference):
        head = TransformerClsHead(np.random.default_rng(102), C_IN, N_CLS,
                                  embed_dim=E_DIM, n_heads=HEADS, dtype=np.float64)
        E.make_transformer_cls_equivalent(head, reference)
        for seed in range(20):
            x = feat(np.random.default_rng(seed), extent=4)
            assert np.array_equal(head.forward(x).semantic_probs.data.argmax(axis=0),
                                  self._argmax_fixed(reference, x))

    def test_transformer_cls_mask_matches(self, reference):
        head = TransformerClsMaskHead(np.random.default_rng(103), C_IN, N_CLS,
                                      embed_dim=E_DIM, n_heads=HEADS,
                                      dtype=np.float64)
        E.make_transformer_cls_mask_equivalent(head, reference)
        for seed in range(20):
            x = feat(np.random.default_rng(seed), extent=4)
            assert np.array_equal(head.forward(x).semantic_probs.data.argmax(axis=0),
                                  self._argmax_fixed(reference, x))

    def test_decoupled_matches(self, reference):
        head = DecoupledHead(np.random.default_rng(104), C_IN, N_CLS,
                             embed_dim=E_DIM, n_heads=HEADS, dtype=np.float64)
        E.make_decoupled_equivalent(head, reference)
        for seed in range(20):
            x = feat(np.random.default_rng(seed), extent=4)
            out = head.forward(x)
            probs = T.softmax(out.class_logits, axis=1).data
            masks = T.sigmoid(out.mask_logits).data.reshape(N_CLS, -1)
            labels = assemble_semantic(probs, masks, background_threshold=None)
            assert np.array_equal(labels - 1, self._argmax_fixed(reference, x).reshape(-1))


def test_build_head_registry():
    rng = np.random.default_rng(0)
    for variant in ("fixed", "learnable_cls", "transformer_cls",
                    "transformer_cls_mask", "decoupled"):
        head = build_head(variant, rng, C_IN, N_CLS, embed_dim=E_DIM, n_heads=HEADS)
        assert head.variant == variant
    with pytest.raises(Exception):
        build_head("nope", rng, C_IN, N_CLS)
