"""Set-prediction losses: dice/bce/ce primitives, matching costs, and the
deep-supervised matched loss.

The bipartite matching itself is non-differentiable selection: it is
computed once per forward pass from the *final* (finest) stage's
predictions on detached values, then held fixed while gradients flow
through every stage's class and mask terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .assignment import Assignment, hungarian
from .errors import CapacityError, DimensionError
from .tensor import Tensor

DICE_EPS = 1.0
_PROB_CLIP = 1e-7


@dataclass
class LossWeights:
    lambda_class: float = 2.0
    lambda_bce: float = 10.0
    lambda_dice: float = 10.0
    no_object_weight: float = 0.1


@dataclass
class GroundTruthSet:
    """Foreground segments of one volume: (label, binary mask) pairs.

    Labels live in {1..num_classes}; masks are {0,1} and pairwise disjoint
    (semantic labels partition the foreground).
    """

    labels: np.ndarray          # (N_gt,) int64
    masks: np.ndarray           # (N_gt, D, H, W) float, values {0,1}
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.masks = np.asarray(self.masks)
        if self.masks.ndim != 4 or self.masks.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"masks {self.masks.shape} do not pair with labels {self.labels.shape}")
        if self.labels.size:
            if self.labels.min() < 1 or self.labels.max() > self.num_classes:
                raise DimensionError("segment labels must lie in 1..K")
            vals = np.unique(self.masks)
            if not np.isin(vals, (0.0, 1.0)).all():
                raise DimensionError("segment masks must be binary")
            if self.masks.sum(axis=0).max() > 1.0:
                raise DimensionError("segments overlap")

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def from_label_volume(cls, labels: np.ndarray, num_classes: int) -> "GroundTruthSet":
        """Extract one segment per foreground class present in the volume."""
        present = [c for c in range(1, num_classes + 1) if (labels == c).any()]
        masks = np.stack([(labels == c).astype(np.float64) for c in present]) \
            if present else np.zeros((0,) + labels.shape)
        return cls(np.asarray(present, dtype=np.int64), masks, num_classes)

    def downsample(self, factor: int) -> "GroundTruthSet":
        """Nearest-neighbor (block-corner) label downsampling per segment."""
        if factor == 1:
            return self
        masks = self.masks[:, ::factor, ::factor, ::factor]
        return GroundTruthSet(self.labels.copy(), np.ascontiguousarray(masks),
                              self.num_classes)


# ---------------------------------------------------------------------------
# loss primitives (forward + hand-written gradient)
# ---------------------------------------------------------------------------

def dice_loss(probs: Tensor, target: np.ndarray) -> Tensor:
    """Soft dice on probabilities: 1 - (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps)."""
    t = np.asarray(target, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise DimensionError(f"target shape {t.shape} != probs shape {probs.shape}")
    p = probs.data
    inter = float((p * t).sum())
    denom = float(p.sum()) + float(t.sum()) + DICE_EPS
    out = np.asarray(1.0 - (2.0 * inter + DICE_EPS) / denom, dtype=probs.dtype)

    def backward(g):
        gp = -(2.0 * t * denom - (2.0 * inter + DICE_EPS)) / (denom * denom)
        return (g * gp.astype(probs.dtype),)

    return T._make(out, (probs,), backward)


def bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from logits, stable log-sum-exp form."""
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"target shape {t.shape} != logits shape {logits.shape}")
    x = logits.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.mean(), dtype=logits.dtype)
    n = x.size

    def backward(g):
        return (g * (T._sigmoid_stable(x) - t) / n,)

    return T._make(out, (logits,), backward)


def bce_loss_probs(probs: Tensor, target: np.ndarray) -> Tensor:
    """Mean BCE on probabilities (coupled heads emit softmax outputs, not
    per-mask logits); probabilities are clipped away from {0,1}."""
    t = np.asarray(target, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise DimensionError(f"target shape {t.shape} != probs shape {probs.shape}")
    p = np.clip(probs.data, _PROB_CLIP, 1.0 - _PROB_CLIP)
    out = np.asarray(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean(),
                     dtype=probs.dtype)
    n = p.size
    interior = (probs.data > _PROB_CLIP) & (probs.data < 1.0 - _PROB_CLIP)

    def backward(g):
        gp = np.where(interior, (p - t) / (p * (1.0 - p)) / n, 0.0)
        return (g * gp.astype(probs.dtype),)

    return T._make(out, (probs,), backward)


def ce_class_loss(class_logits: Tensor, labels: np.ndarray,
                  no_object_weight: float = 1.0,
                  no_object_index: int | None = None) -> Tensor:
    """Weighted sum over rows of -log softmax(logits)[label].

    ``labels`` are column indices; rows whose label equals
    ``no_object_index`` are scaled by ``no_object_weight``.
    """
    x = class_logits.data
    if x.ndim == 1:
        x = x[None, :]
    rows, k1 = x.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != rows:
        raise DimensionError(f"{rows} rows but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= k1:
        raise DimensionError("label outside logit columns")
    weights = np.ones(rows, dtype=x.dtype)
    if no_object_index is not None:
        weights[labels == no_object_index] = no_object_weight

    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    nll = (lse.squeeze(1) - x[np.arange(rows), labels])
    out = np.asarray((weights * nll).sum(), dtype=class_logits.dtype)

    def backward(g):
        soft = np.exp(x - lse)
        soft[np.arange(rows), labels] -= 1.0
        gx = (weights[:, None] * soft) * g
        return (gx.reshape(class_logits.shape).astype(class_logits.dtype),)

    return T._make(out, (class_logits,), backward)


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def pairwise_cost(class_probs: np.ndarray, mask_logits: np.ndarray,
                  gt: GroundTruthSet, weights: LossWeights) -> np.ndarray:
    """(N_gt, N_q) matching costs from detached final-stage predictions.

    cost[j, i] = -lc * p_i(c_j) + lb * bce(m_i, t_j) + ld * dice(sig(m_i), t_j),
    evaluated over full masks.
    """
    n_q = mask_logits.shape[0]
    v = int(np.prod(mask_logits.shape[1:]))
    m = mask_logits.reshape(n_q, v).astype(np.float64)
    t = gt.masks.reshape(gt.count, v).astype(np.float64)

    cls_term = -class_probs[:, gt.labels - 1].T  # (N_gt, N_q)

    softplus = (np.maximum(m, 0) + np.log1p(np.exp(-np.abs(m)))).mean(axis=1)
    bce = softplus[None, :] - (t @ m.T) / v  # (N_gt, N_q)

    sig = T._sigmoid_stable(m)
    inter = t @ sig.T
    denom = sig.sum(axis=1)[None, :] + t.sum(axis=1)[:, None] + DICE_EPS
    dice = 1.0 - (2.0 * inter + DICE_EPS) / denom

    return (weights.lambda_class * cls_term + weights.lambda_bce * bce
            + weights.lambda_dice * dice)


def match_predictions(class_logits: Tensor, mask_logits: Tensor,
                      gt: GroundTruthSet, weights: LossWeights) -> Assignment:
    """Hungarian assignment of ground-truth segments to queries (final stage)."""
    n_q = class_logits.shape[0]
    if gt.count > n_q:
        raise CapacityError(f"{gt.count} ground-truth segments exceed {n_q} queries")
    if gt.count == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    x = class_logits.data.astype(np.float64)
    m = x.max(axis=1, keepdims=True)
    probs = np.exp(x - m)
    probs /= probs.sum(axis=1, keepdims=True)
    cost = pairwise_cost(probs, mask_logits.data, gt, weights)
    return hungarian(cost)


# ---------------------------------------------------------------------------
# deep supervision
# ---------------------------------------------------------------------------

def deep_sup_weights(num_stages: int) -> np.ndarray:
    """Halving-per-coarser-stage weights, normalized to sum to 1.

    Index 0 is the finest stage: L=3 gives exactly (4/7, 2/7, 1/7).
    """
    if num_stages < 1:
        raise DimensionError("need at least one stage")
    denom = 2 ** num_stages - 1
    return np.array([2 ** (num_stages - 1 - l) / denom for l in range(num_stages)],
                    dtype=np.float64)


# ---------------------------------------------------------------------------
# total matched loss
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: float = 0.0
    class_term: float = 0.0
    bce_term: float = 0.0
    dice_term: float = 0.0
    assignment: Assignment | None = None

    def as_dict(self) -> dict:
        return {"loss_total": self.total, "loss_class": self.class_term,
                "loss_bce": self.bce_term, "loss_dice": self.dice_term}


def total_loss(stage_outputs, gt: GroundTruthSet, weights: LossWeights,
               assignment: Assignment | None = None) -> tuple[Tensor, LossBreakdown]:
    """Deep-supervised matched loss over stages ordered finest -> coarsest.

    ``stage_outputs`` items expose ``class_logits`` (N_q, K+1) and
    ``mask_logits`` (N_q, D_l, H_l, W_l).  Matching is derived from stage 0
    (the finest) only, then reused everywhere; pass ``assignment`` to
    supply a precomputed one.
    """
    stages = list(stage_outputs)
    if not stages:
        raise DimensionError("no stage outputs")
    n_q, k1 = stages[0].class_logits.shape
    if gt.count > n_q:
        raise CapacityError(f"{gt.count} ground-truth segments exceed {n_q} queries")
    if k1 != gt.num_classes + 1:
        raise DimensionError(
            f"class logits have {k1} columns, expected K+1={gt.num_classes + 1}")

    if assignment is None:
        assignment = match_predictions(stages[0].class_logits, stages[0].mask_logits,
                                       gt, weights)
    sigma = assignment.column_of
    no_object = gt.num_classes  # last column

    query_labels = np.full(n_q, no_object, dtype=np.int64)
    for j, q in enumerate(sigma):
        query_labels[q] = gt.labels[j] - 1

    w_l = deep_sup_weights(len(stages))
    gt_shape = gt.masks.shape[1:]

    terms: list[Tensor] = []
    breakdown = LossBreakdown(assignment=assignment)
    for l, stage in enumerate(stages):
        stage_shape = stage.mask_logits.shape[1:]
        factor = gt_shape[0] // stage_shape[0]
        if factor < 1 or any(factor * s != g for s, g in zip(stage_shape, gt_shape)):
            raise DimensionError(
                f"stage {l} resolution {stage_shape} does not divide GT {gt_shape}")
        gt_l = gt.downsample(factor)

        ce = ce_class_loss(stage.class_logits, query_labels,
                           no_object_weight=weights.no_object_weight,
                           no_object_index=no_object)
        stage_term = T.scale(ce, weights.lambda_class * w_l[l])
        breakdown.class_term += weights.lambda_class * w_l[l] * ce.item()

        for j, q in enumerate(sigma):
            row = T.reshape(T.slice_axis(stage.mask_logits, 0, int(q), int(q) + 1),
                            gt_l.masks.shape[1:])
            b = bce_loss(row, gt_l.masks[j])
            d = dice_loss(T.sigmoid(row), gt_l.masks[j])
            stage_term = T.add(stage_term,
                               T.add(T.scale(b, weights.lambda_bce * w_l[l]),
                                     T.scale(d, weights.lambda_dice * w_l[l])))
            breakdown.bce_term += weights.lambda_bce * w_l[l] * b.item()
            breakdown.dice_term += weights.lambda_dice * w_l[l] * d.item()
        terms.append(stage_term)

    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    breakdown.total = out.item()
    return out, breakdown


def semantic_coupled_loss(semantic_probs: Tensor,
                          class_masks: np.ndarray) -> tuple[Tensor, LossBreakdown]:
    """Dice+BCE summed over coupled semantic channels.

    ``semantic_probs`` is (N_cls, D, H, W) softmax output; ``class_masks``
    the matching one-hot target stack.
    """
    n_cls = semantic_probs.shape[0]
    if class_masks.shape != semantic_probs.shape:
        raise DimensionError(
            f"targets {class_masks.shape} != probs {semantic_probs.shape}")
    breakdown = LossBreakdown()
    out = None
    for c in range(n_cls):
        row = T.reshape(T.slice_axis(semantic_probs, 0, c, c + 1),
                        semantic_probs.shape[1:])
        b = bce_loss_probs(row, class_masks[c])
        d = dice_loss(row, class_masks[c])
        term = T.add(b, d)
        breakdown.bce_term += b.item()
        breakdown.dice_term += d.item()
        out = term if out is None else T.add(out, term)
    breakdown.total = out.item()
    return out, breakdown
