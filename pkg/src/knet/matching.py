"""Mask-driven one-to-one target assignment and the set-prediction loss.

Predicted kernels are matched to ground-truth instances by minimum-cost
bipartite assignment where the cost mirrors the training loss itself:
negative class probability plus mask cross-entropy plus dice.  Matched
kernels learn the instance; unmatched kernels learn "no object" through
focal-loss negatives.  Kernels bound to semantic classes skip matching
and are supervised directly against the semantic map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import CapacityError, NumericError
from .head import StageOutput
from .tensor import Tensor

PROB_CLAMP = 1e-7
DICE_EPS = 1e-4


@dataclass
class LossWeights:
    lam_cls: float = 2.0
    lam_ce: float = 1.0
    lam_dice: float = 4.0
    lam_seg: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class TaskLayout:
    """How kernel rows map to instance slots and semantic classes."""

    mode: str                      # semantic | instance | panoptic
    image_size: tuple[int, int]    # (H, W) of the ground-truth rasters
    num_instance_kernels: int      # rows [0, n) are instance kernels
    thing_class_ids: list[int]     # class-logit column c <-> thing_class_ids[c]
    stuff_class_ids: list[int]     # panoptic: rows [n, n+len) <-> these classes
    semantic_class_ids: list[int]  # semantic mode: row k <-> this class


@dataclass
class CostMatrix:
    costs: np.ndarray              # (n_pred, n_gt)
    cls: np.ndarray
    ce: np.ndarray
    dice: np.ndarray


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]   # (pred_index, gt_index), sorted by pred
    unmatched_preds: list[int]


@dataclass
class LossBreakdown:
    total: float
    cls: float
    ce: float
    dice: float
    seg: float
    per_stage: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "total": self.total, "cls": self.cls, "ce": self.ce,
            "dice": self.dice, "seg": self.seg, "per_stage": self.per_stage,
        }


# ---------------------------------------------------------------------------
# differentiable loss terms

def focal_loss(probs: Tensor, targets: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """Focal binary classification loss.

    ``probs`` are per-class probabilities in (0, 1); ``targets`` a {0,1}
    array of the same shape.  Sum over the class axis (last), mean over
    everything else.
    """
    p = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(targets, dtype=p.data.dtype)
    pos = T.pow_const(1.0 - p, gamma) * T.log(p) * (-alpha)
    neg = T.pow_const(p, gamma) * T.log(1.0 - p) * (alpha - 1.0)
    per = pos * t + neg * (1.0 - t)
    summed = T.reduce_sum(per, axes=-1)
    return T.reduce_mean(summed) if summed.ndim > 0 else summed


def dice_loss(pred_probs: Tensor, gt: np.ndarray) -> Tensor:
    """Per-mask dice loss over the last axis; returns one value per mask."""
    g = np.asarray(gt, dtype=pred_probs.data.dtype)
    inter = T.reduce_sum(pred_probs * g, axes=-1)
    denom = T.reduce_sum(pred_probs, axes=-1) + Tensor(g.sum(axis=-1))
    return 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def mask_ce_loss(pred_logits: Tensor, gt: np.ndarray) -> Tensor:
    """Binary cross-entropy with logits, mean over the last (pixel) axis."""
    g = np.asarray(gt, dtype=pred_logits.data.dtype)
    z = pred_logits
    # stable form: max(z,0) - z*g + log(1 + exp(-|z|))
    absz = T.relu(z) + T.relu(-z)
    per_pixel = T.relu(z) - z * g + T.log(1.0 + T.exp(-absz))
    return T.reduce_mean(per_pixel, axes=-1)


# ---------------------------------------------------------------------------
# matching

def matching_cost(class_probs: np.ndarray, mask_logits: np.ndarray,
                  gt_classes: np.ndarray, gt_masks: np.ndarray,
                  weights: LossWeights) -> CostMatrix:
    """Pairwise assignment costs for one image, mirroring the loss terms.

    class_probs: (n_pred, n_cls); mask_logits: (n_pred, HW) at GT
    resolution; gt_classes: (n_gt,) class-column indices; gt_masks:
    (n_gt, HW) binary.
    """
    n_pred = mask_logits.shape[0]
    n_gt = gt_masks.shape[0]
    if n_gt == 0:
        empty = np.zeros((n_pred, 0))
        return CostMatrix(empty, empty, empty, empty)
    p = 1.0 / (1.0 + np.exp(-mask_logits.astype(np.float64)))
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = gt_masks.astype(np.float64)
    hw = p.shape[1]
    ce = -(np.log(p) @ g.T + np.log1p(-p) @ (1.0 - g).T) / hw
    inter = p @ g.T
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (p.sum(1)[:, None] + g.sum(1)[None, :] + DICE_EPS)
    cls = -class_probs.astype(np.float64)[:, gt_classes]
    total = weights.lam_cls * cls + weights.lam_ce * ce + weights.lam_dice * dice
    return CostMatrix(total, cls, ce, dice)


def _lsap_min(costs: np.ndarray) -> float:
    if costs.shape[1] == 0:
        return 0.0
    r, c = linear_sum_assignment(costs)
    return float(costs[r, c].sum())


def hungarian_assign(costs: CostMatrix | np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment of predictions to ground truth.

    Every ground-truth column is matched (requires n_pred >= n_gt).  Among
    equal-cost optima the lexicographically smallest pair list wins, so
    degenerate cost matrices resolve deterministically.
    """
    c = costs.costs if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise CapacityError(f"cost matrix must be 2-D, got shape {c.shape}")
    n_pred, n_gt = c.shape
    if n_pred < n_gt:
        raise CapacityError(f"{n_pred} kernels cannot cover {n_gt} ground-truth instances")
    if n_gt == 0:
        return Assignment([], list(range(n_pred)))
    if not np.isfinite(c).all():
        raise NumericError("assignment costs must be finite")

    rows, cols = linear_sum_assignment(c)
    best = float(c[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    pairs: list[tuple[int, int]] = []
    free_gt = list(range(n_gt))
    locked = 0.0
    for p in range(n_pred):
        if not free_gt:
            break
        rest_preds = np.arange(p + 1, n_pred)
        matched_here = None
        for g in free_gt:
            others = [x for x in free_gt if x != g]
            if len(others) > len(rest_preds):
                continue
            completion = _lsap_min(c[np.ix_(rest_preds, others)])
            if locked + c[p, g] + completion <= best + tol:
                matched_here = g
                break
        if matched_here is None:
            # leaving p unmatched must stay optimal and feasible
            continue
        pairs.append((p, matched_here))
        free_gt.remove(matched_here)
        locked += c[p, matched_here]
    matched_preds = {p for p, _ in pairs}
    return Assignment(pairs, [i for i in range(n_pred) if i not in matched_preds])


# ---------------------------------------------------------------------------
# full set-prediction loss

def semantic_loss(mask_logits: Tensor, sem_map: np.ndarray,
                  class_ids: list[int], valid: np.ndarray | None = None,
                  dice_activation: str = "softmax") -> Tensor:
    """Softmax cross-entropy plus per-class dice vs a label raster.

    mask_logits: (B, K, HW); sem_map: (B, HW) integer classes; class_ids
    gives the class of each of the K channels.  ``valid`` restricts the
    cross-entropy to labeled pixels (used when thing pixels have no
    channel to fall into).  ``dice_activation`` picks the probabilities
    the dice term supervises: softmax when the channels compete for every
    pixel (semantic mode), sigmoid when the masks are read out as
    independent binary masks (panoptic stuff rows) so their absolute
    scale stays trained.
    """
    b, k, hw = mask_logits.shape
    onehot = np.zeros((b, k, hw), dtype=mask_logits.data.dtype)
    for ki, cid in enumerate(class_ids):
        onehot[:, ki, :] = sem_map == cid
    logp = T.log_softmax(mask_logits, axis=1)
    ce_pix = T.reduce_sum(logp * onehot, axes=1) * -1.0  # (B, HW)
    if valid is None:
        ce = T.reduce_mean(ce_pix)
    else:
        w = valid.astype(mask_logits.data.dtype)
        ce = T.reduce_sum(ce_pix * w) * (1.0 / max(1.0, float(w.sum())))
    probs = T.sigmoid(mask_logits) if dice_activation == "sigmoid" else T.softmax(mask_logits, axis=1)
    dice = T.reduce_mean(dice_loss(probs, onehot))
    return ce + dice


def _gather_rows(flat_logits: Tensor, rows: list[int]) -> Tensor:
    return T.index_select(flat_logits, 0, np.asarray(rows, dtype=np.int64))


def set_prediction_loss(stages: list[StageOutput], gts: list,
                        layout: TaskLayout,
                        weights: LossWeights | None = None) -> tuple[Tensor, LossBreakdown]:
    """Deep-supervised loss over all stages; matching is redone per stage.

    ``gts`` is one GroundTruthSample-like object per batch item, exposing
    ``instances`` (list of (class_id, bool mask)) and ``semantic``
    (H x W class raster).
    """
    weights = weights or LossWeights()
    h, w = layout.image_size
    hw = h * w
    n_ins = layout.num_instance_kernels
    thing_index = {cid: i for i, cid in enumerate(layout.thing_class_ids)}
    k_cls = len(layout.thing_class_ids)

    total = Tensor(0.0)
    agg = {"cls": 0.0, "ce": 0.0, "dice": 0.0, "seg": 0.0}
    per_stage: list[dict[str, float]] = []

    gt_classes = []
    gt_masks = []
    for gt in gts:
        cls = np.array([thing_index[c] for c, _ in gt.instances], dtype=np.int64)
        masks = (
            np.stack([m.reshape(-1) for _, m in gt.instances]).astype(np.float32)
            if gt.instances
            else np.zeros((0, hw), dtype=np.float32)
        )
        gt_classes.append(cls)
        gt_masks.append(masks)
    sem_maps = np.stack([gt.semantic.reshape(-1) for gt in gts]) if gts else None

    for stage in stages:
        b, n_total = stage.mask_logits.shape[:2]
        up = T.bilinear_upsample(stage.mask_logits, h, w)
        up_flat = T.reshape(up, (b, n_total, hw))
        stage_terms = {"cls": 0.0, "ce": 0.0, "dice": 0.0, "seg": 0.0}
        stage_loss = Tensor(0.0)

        if layout.mode == "semantic":
            seg = semantic_loss(up_flat, sem_maps, layout.semantic_class_ids)
            stage_loss = stage_loss + weights.lam_seg * seg
            stage_terms["seg"] = float(seg.data)
        else:
            # instance kernels: match, then classify + segment
            focal_targets = np.zeros((b, n_ins, k_cls), dtype=np.float32)
            sel_rows: list[int] = []
            sel_masks: list[np.ndarray] = []
            cls_probs = 1.0 / (1.0 + np.exp(-stage.class_logits.data[:, :n_ins]))
            for bi in range(b):
                if gt_masks[bi].shape[0] == 0:
                    continue
                cost = matching_cost(
                    cls_probs[bi], up_flat.data[bi, :n_ins], gt_classes[bi],
                    gt_masks[bi], weights,
                )
                assign = hungarian_assign(cost)
                for p, g in assign.pairs:
                    focal_targets[bi, p, gt_classes[bi][g]] = 1.0
                    sel_rows.append(bi * n_total + p)
                    sel_masks.append(gt_masks[bi][g])
            cls_term = focal_loss(
                T.sigmoid(T.index_select(stage.class_logits, 1, np.arange(n_ins))),
                focal_targets, weights.focal_alpha, weights.focal_gamma,
            )
            stage_loss = stage_loss + weights.lam_cls * cls_term
            stage_terms["cls"] = float(cls_term.data)

            if sel_rows:
                flat_all = T.reshape(up_flat, (b * n_total, hw))
                pred_rows = _gather_rows(flat_all, sel_rows)
                gt_rows = np.stack(sel_masks)
                ce_term = T.reduce_mean(mask_ce_loss(pred_rows, gt_rows))
                dice_term = T.reduce_mean(dice_loss(T.sigmoid(pred_rows), gt_rows))
                stage_loss = stage_loss + weights.lam_ce * ce_term + weights.lam_dice * dice_term
                stage_terms["ce"] = float(ce_term.data)
                stage_terms["dice"] = float(dice_term.data)

            if layout.mode == "panoptic" and layout.stuff_class_ids:
                # stuff kernels: fixed per-class assignment, same binary mask
                # losses as matched instances; panoptic masks are sigmoid-read
                # at inference, so the supervision must pin that scale and
                # penalize bleed over thing pixels at full weight
                stuff_rows = np.arange(n_ins, n_total)
                stuff_logits = T.index_select(up_flat, 1, stuff_rows)
                targets = np.stack(
                    [(sem_maps == cid) for cid in layout.stuff_class_ids], axis=1
                ).astype(np.float32)
                stuff_ce = T.reduce_mean(mask_ce_loss(stuff_logits, targets))
                stuff_dice = T.reduce_mean(dice_loss(T.sigmoid(stuff_logits), targets))
                seg = stuff_ce + stuff_dice
                stage_loss = stage_loss + weights.lam_seg * seg
                stage_terms["seg"] = float(seg.data)

        total = total + stage_loss
        for key in agg:
            agg[key] += stage_terms[key]
        per_stage.append(dict(stage_terms))

    breakdown = LossBreakdown(
        total=float(total.data), cls=agg["cls"], ce=agg["ce"],
        dice=agg["dice"], seg=agg["seg"], per_stage=per_stage,
    )
    return total, breakdown
