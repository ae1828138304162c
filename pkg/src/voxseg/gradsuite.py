"""Named gradient-verification cases for every differentiable operation.

Each case runs a central finite-difference check at 64-bit over multiple
seeds.  Objectives are weighted where a raw output sum would be constant
(softmax slices, normalized slices), since a constant objective leaves
only FD noise to compare.  Exposed through the ``gradcheck`` CLI
subcommand and asserted wholesale by the acceptance suite.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from . import losses as L
from . import tensor as T
from .fsad import FsadAttention, SamplingSpec
from .heads import EmbeddingBranch
from .tensor import GradReport, Tensor

DEFAULT_TOL = 1e-4
DEFAULT_SEEDS = 5


def _t(rng, shape):
    return T.tensor(rng.standard_normal(shape), dtype=np.float64)


def _case_matmul(seed, tol):
    rng = np.random.default_rng(seed)
    return T.gradcheck(T.matmul, [_t(rng, (3, 4)), _t(rng, (4, 2))],
                       tol=min(tol, 1e-6), name="matmul")


def _case_elementwise(seed, tol):
    rng = np.random.default_rng(seed)
    b = _t(rng, (3, 4))

    def fn(a):
        x = T.elementwise(a, b, kind="add")
        x = T.elementwise(x, b, kind="mul")
        x = T.elementwise(x, kind="gelu")
        x = T.elementwise(x, kind="sigmoid")
        return T.elementwise(x, kind="scale", factor=-1.5)

    return T.gradcheck(fn, [_t(rng, (3, 4))], tol=tol, name="elementwise")


def _case_softmax(seed, tol):
    rng = np.random.default_rng(seed)
    w = _t(rng, (4, 6))
    return T.gradcheck(lambda x: T.mul(T.softmax(x, 1), w), [_t(rng, (4, 6))],
                       tol=tol, name="softmax")


def _case_conv3d(seed, tol):
    rng = np.random.default_rng(seed)
    w = T.tensor(0.3 * rng.standard_normal((3, 2, 3, 3, 3)), dtype=np.float64)
    return T.gradcheck(lambda x, ww, b: T.conv3d(x, ww, b, stride=2, padding=1),
                       [_t(rng, (1, 2, 5, 4, 4)), w, _t(rng, (3,))],
                       tol=tol, name="conv3d")


def _case_avg_pool(seed, tol):
    rng = np.random.default_rng(seed)
    return T.gradcheck(lambda x: T.avg_pool3d(x, 2), [_t(rng, (1, 2, 4, 4, 4))],
                       tol=tol, name="avg_pool3d")


def _case_grid_sample(seed, tol):
    rng = np.random.default_rng(seed)
    cols = []
    for n in (5, 5, 5):
        idx = rng.integers(0, n - 1, size=24)
        frac = rng.uniform(0.1, 0.9, size=24)
        cols.append((idx + frac) / (n - 1))
    coords = T.tensor(np.stack(cols, axis=1), dtype=np.float64)
    return T.gradcheck(T.grid_sample_trilinear, [_t(rng, (2, 5, 5, 5)), coords],
                       tol=tol, name="grid_sample")


def _case_layer_norm(seed, tol):
    rng = np.random.default_rng(seed)
    return T.gradcheck(lambda x, g, b: T.layer_norm(x, g, b, axis=1),
                       [_t(rng, (4, 8)), _t(rng, (8,)), _t(rng, (8,))],
                       tol=tol, name="layer_norm")


def _case_instance_norm(seed, tol):
    rng = np.random.default_rng(seed)
    w = _t(rng, (2, 3, 3, 4, 3))
    return T.gradcheck(lambda x, g, b: T.mul(T.instance_norm3d(x, g, b), w),
                       [_t(rng, (2, 3, 3, 4, 3)), _t(rng, (3,)), _t(rng, (3,))],
                       tol=tol, name="instance_norm3d")


def _case_dice(seed, tol):
    rng = np.random.default_rng(seed)
    target = (rng.uniform(0, 1, 30) > 0.5).astype(np.float64)
    p = T.tensor(rng.uniform(0.1, 0.9, 30), dtype=np.float64)
    return T.gradcheck(lambda x: L.dice_loss(x, target), [p], tol=tol,
                       name="dice_loss")


def _case_bce(seed, tol):
    rng = np.random.default_rng(seed)
    target = (rng.uniform(0, 1, 30) > 0.5).astype(np.float64)
    return T.gradcheck(lambda x: L.bce_loss(x, target), [_t(rng, (30,))],
                       tol=tol, name="bce_loss")


def _case_ce(seed, tol):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, size=4)
    return T.gradcheck(lambda x: L.ce_class_loss(x, labels, no_object_weight=0.1,
                                                 no_object_index=4),
                       [_t(rng, (4, 5))], tol=min(tol, 1e-6), name="softmax_ce")


def _linear_fields(extents, e_dim, rng):
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


def _case_fsad_attention(seed, tol):
    rng = np.random.default_rng(seed)
    e_dim = 8
    extents = [(4, 4, 4), (2, 2, 2)]
    spec = SamplingSpec(points_k=2, query_levels=1, heads=2)
    attn = FsadAttention(np.random.default_rng(seed + 1000), e_dim, extents, spec,
                         dtype=np.float64)
    attn.att_mlp.fc2.w.data[:] = 0.3 * rng.standard_normal(attn.att_mlp.fc2.w.shape)
    attn.out_proj.w.data[:] = rng.standard_normal(attn.out_proj.w.shape)
    values = _linear_fields(extents, e_dim, rng)
    refs = rng.uniform(0.3, 0.7, (4, 3))
    tokens = _t(rng, (4, e_dim))
    w0 = T.tensor(0.1 * rng.standard_normal(attn.off_mlp.fc2.w.shape),
                  dtype=np.float64)
    b0 = T.tensor(0.05 * rng.standard_normal(attn.off_mlp.fc2.b.shape),
                  dtype=np.float64)

    def fn(toks, w2, b2):
        attn.off_mlp.fc2.w = w2
        attn.off_mlp.fc2.b = b2
        return attn.forward(toks, refs, values)

    try:
        return T.gradcheck(fn, [tokens, w0, b0], tol=tol, name="fsad_attention")
    finally:
        attn.off_mlp.fc2.w = attn.off_mlp.fc2._params["weight"].tensor
        attn.off_mlp.fc2.b = attn.off_mlp.fc2._params["bias"].tensor


def _branch_case(seed, tol, out_dim, name):
    rng = np.random.default_rng(seed)
    branch = EmbeddingBranch(np.random.default_rng(seed + 2000), 8, out_dim,
                             dtype=np.float64)
    w1 = T.tensor(branch.mlp.fc1.w.data.copy(), dtype=np.float64)
    w2 = T.tensor(branch.mlp.fc2.w.data.copy(), dtype=np.float64)

    def fn(tokens, a, b):
        branch.mlp.fc1.w = a
        branch.mlp.fc2.w = b
        return branch.forward(tokens)

    try:
        return T.gradcheck(fn, [_t(rng, (4, 8)), w1, w2], tol=tol, name=name)
    finally:
        branch.mlp.fc1.w = branch.mlp.fc1._params["weight"].tensor
        branch.mlp.fc2.w = branch.mlp.fc2._params["weight"].tensor


def _case_mask_branch(seed, tol):
    return _branch_case(seed, tol, out_dim=6, name="mask_branch")


def _case_class_branch(seed, tol):
    return _branch_case(seed, tol, out_dim=4, name="class_branch")


def _case_matched_loss(seed, tol):
    rng = np.random.default_rng(seed)
    lab = np.zeros((4, 4, 4), dtype=np.int64)
    lab[:2, :2, :2] = 1
    lab[2:, 2:, :2] = 2
    gt = L.GroundTruthSet.from_label_volume(lab, num_classes=2)
    w = L.LossWeights()
    cls_f = rng.standard_normal((3, 3))
    msk_f = rng.standard_normal((3, 4, 4, 4))
    frozen = L.match_predictions(T.tensor(cls_f, dtype=np.float64),
                                 T.tensor(msk_f, dtype=np.float64), gt, w)

    def fn(a, b, c, d):
        stages = [SimpleNamespace(class_logits=a, mask_logits=b),
                  SimpleNamespace(class_logits=c, mask_logits=d)]
        return L.total_loss(stages, gt, w, assignment=frozen)[0]

    return T.gradcheck(fn, [T.tensor(cls_f, dtype=np.float64),
                            T.tensor(msk_f, dtype=np.float64),
                            _t(rng, (3, 3)), _t(rng, (3, 2, 2, 2))],
                       tol=tol, name="matched_total_loss")


SUITE = {
    "matmul": _case_matmul,
    "elementwise": _case_elementwise,
    "softmax": _case_softmax,
    "conv3d": _case_conv3d,
    "avg_pool3d": _case_avg_pool,
    "grid_sample": _case_grid_sample,
    "layer_norm": _case_layer_norm,
    "instance_norm3d": _case_instance_norm,
    "dice_loss": _case_dice,
    "bce_loss": _case_bce,
    "softmax_ce": _case_ce,
    "fsad_attention": _case_fsad_attention,
    "mask_branch": _case_mask_branch,
    "class_branch": _case_class_branch,
    "matched_total_loss": _case_matched_loss,
}


def run_suite(ops=None, seeds: int = DEFAULT_SEEDS,
              tol: float = DEFAULT_TOL) -> list[GradReport]:
    names = list(SUITE) if not ops else list(ops)
    reports = []
    for name in names:
        if name not in SUITE:
            raise KeyError(f"unknown gradcheck case {name!r}; "
                           f"known: {', '.join(SUITE)}")
        for seed in range(seeds):
            reports.append(SUITE[name](seed, tol))
    return reports
