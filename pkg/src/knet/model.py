"""Task assembly: a small two-branch convolutional backbone, static mask
kernels, the iterative refinement head, and the inference-side decoding
(instance binarization and panoptic pasting).

One model class covers the three modes:

* semantic: one kernel per class, masks compete through a softmax.
* instance: matched instance kernels; a semantic branch provides
  auxiliary supervision built from the instance masks themselves.
* panoptic: instance kernels concatenated with the stuff rows of the
  semantic kernels; merged to a segment raster by score-weighted pasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import GroundTruthSample, STUFF_CLASS_IDS, THING_CLASS_IDS
from .errors import ConfigError, ContractError
from .head import (
    SIGMOID, SOFTMAX, IterativeKernelHead, KernelMlp, StageOutput, predict_masks,
)
from .layers import Conv2d, Layer, positional_encoding_2d
from .matching import LossBreakdown, LossWeights, TaskLayout, semantic_loss, set_prediction_loss
from .metrics import PanopticMap, SegmentInfo
from .tensor import Tensor

MODES = ("semantic", "instance", "panoptic")
BACKGROUND_ID = 0


@dataclass
class ModelConfig:
    mode: str = "panoptic"
    image_size: int = 64
    channels: int = 32
    num_instance_kernels: int = 10
    stages: int = 3
    heads: int = 4
    thing_class_ids: list[int] = field(default_factory=lambda: list(THING_CLASS_IDS))
    stuff_class_ids: list[int] = field(default_factory=lambda: list(STUFF_CLASS_IDS))
    aku: bool = True
    ki: bool = True
    positional_encoding: bool = True
    score_floor: float = 0.3
    mask_threshold: float = 0.5
    min_area: int = 16
    keep_fraction: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.image_size % 4 != 0:
            raise ConfigError(f"image size {self.image_size} must be divisible by 4")
        if self.channels % 4 != 0 or self.channels % self.heads != 0:
            raise ConfigError(
                f"channel width {self.channels} must be divisible by 4 and by {self.heads} heads"
            )

    @property
    def semantic_class_ids(self) -> list[int]:
        if self.mode == "instance":
            # auxiliary branch: background + thing classes, targets derived
            # from the instance masks
            return [BACKGROUND_ID] + list(self.thing_class_ids)
        return list(self.thing_class_ids) + list(self.stuff_class_ids)

    @property
    def num_semantic_kernels(self) -> int:
        return len(self.semantic_class_ids)

    @property
    def stuff_rows(self) -> list[int]:
        ids = self.semantic_class_ids
        return [ids.index(c) for c in self.stuff_class_ids]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "image_size": self.image_size, "channels": self.channels,
            "num_instance_kernels": self.num_instance_kernels, "stages": self.stages,
            "heads": self.heads, "thing_class_ids": list(self.thing_class_ids),
            "stuff_class_ids": list(self.stuff_class_ids), "aku": self.aku, "ki": self.ki,
            "positional_encoding": self.positional_encoding,
            "score_floor": self.score_floor, "mask_threshold": self.mask_threshold,
            "min_area": self.min_area, "keep_fraction": self.keep_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class BackboneLite(Layer):
    """Two stride-2 stem convs, then two small branches at stride 4."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.channels
        self.stem1 = Conv2d(3, c, 3, rng, stride=2, padding=1)
        self.stem2 = Conv2d(c, c, 3, rng, stride=2, padding=1)
        self.ins1 = Conv2d(c, c, 3, rng, stride=1, padding=1)
        self.ins2 = Conv2d(c, c, 3, rng, stride=1, padding=1)
        self.sem1 = Conv2d(c, c, 3, rng, stride=1, padding=1)
        self.sem2 = Conv2d(c, c, 3, rng, stride=1, padding=1)
        self.use_pe = cfg.positional_encoding
        self._pe_cache: dict[tuple, Tensor] = {}

    def params(self):
        return self._merge({
            "stem1": self.stem1, "stem2": self.stem2,
            "ins1": self.ins1, "ins2": self.ins2,
            "sem1": self.sem1, "sem2": self.sem2,
        })

    def __call__(self, images: Tensor) -> tuple[Tensor, Tensor]:
        _, _, h, w = images.shape
        if h % 4 or w % 4:
            raise ConfigError(f"input size {(h, w)} must be divisible by 4")
        x = T.relu(self.stem1(images))
        x = T.relu(self.stem2(x))
        if self.use_pe:
            key = (x.shape[1], x.shape[2], x.shape[3], T.get_precision())
            pe = self._pe_cache.get(key)
            if pe is None:
                pe = positional_encoding_2d(x.shape[2], x.shape[3], x.shape[1])
                self._pe_cache[key] = pe
            x = x + pe
        f_ins = T.relu(self.ins2(T.relu(self.ins1(x))))
        f_sem = T.relu(self.sem2(T.relu(self.sem1(x))))
        return f_ins, f_sem


def build_panoptic_inputs(m0_ins: Tensor, m0_sem: Tensor, k0_ins: Tensor,
                          k0_sem: Tensor, f_ins: Tensor, f_sem: Tensor,
                          stuff_rows: list[int]) -> tuple[Tensor, Tensor, Tensor]:
    """Concatenate instance rows with the stuff rows of the semantic set.

    Thing rows of the semantic prediction are dropped: instances already
    cover them.  The two feature branches are summed into the single map
    the update head refines against.
    """
    rows = np.asarray(stuff_rows, dtype=np.int64)
    m0 = T.concat([m0_ins, T.index_select(m0_sem, 1, rows)], axis=1)
    k0 = T.concat([k0_ins, T.index_select(k0_sem, 1, rows)], axis=1)
    return m0, k0, f_ins + f_sem


class SegmentationModel(Layer):
    def __init__(self, cfg: ModelConfig, seed: int = 0, ln_enabled: bool = True):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = BackboneLite(cfg, rng)
        c = cfg.channels
        kscale = 1.0 / np.sqrt(c)
        self.instance_kernels = Tensor(
            rng.standard_normal((cfg.num_instance_kernels, c)) * kscale, requires_grad=True,
        )
        self.semantic_kernels = Tensor(
            rng.standard_normal((cfg.num_semantic_kernels, c)) * kscale, requires_grad=True,
        )
        num_classes = len(cfg.thing_class_ids) if cfg.mode != "semantic" else None
        # start class probabilities below chance: focal negatives dominate
        # early on, and the short desk schedule cannot climb far
        class_bias = -1.0
        if cfg.stages >= 1:
            self.head = IterativeKernelHead(
                c, cfg.stages, num_classes, rng, heads=cfg.heads,
                adaptive_update=cfg.aku, interaction=cfg.ki,
                ln_enabled=ln_enabled, class_bias_init=class_bias,
            )
            self.init_class_branch = self.head.init_class_branch
        else:
            self.head = None
            self.init_class_branch = (
                KernelMlp(c, num_classes, rng, ln_enabled=ln_enabled, out_bias_init=class_bias)
                if num_classes else None
            )

    def params(self):
        out = {f"backbone.{k}": v for k, v in self.backbone.params().items()}
        out["kernels.instance"] = self.instance_kernels
        out["kernels.semantic"] = self.semantic_kernels
        if self.head is not None:
            for k, v in self.head.params().items():
                out[f"head.{k}"] = v
        elif self.init_class_branch is not None:
            for k, v in self.init_class_branch.params().items():
                out[f"head.stage0_cls.{k}"] = v
        return out

    # ------------------------------------------------------------------
    def _static_stage(self, kernels0: Tensor, mask_logits0: Tensor, activation: str) -> StageOutput:
        cls = self.init_class_branch(kernels0) if self.init_class_branch is not None else None
        return StageOutput(kernels0, mask_logits0, cls, activation)

    def forward(self, images: np.ndarray | Tensor,
                gts: list[GroundTruthSample] | None = None,
                weights: LossWeights | None = None):
        """Run the pipeline; with ground truth also return the loss.

        Returns ``stages`` (length S+1) or ``(stages, loss, breakdown)``
        in training mode.
        """
        x = images if isinstance(images, Tensor) else Tensor(images)
        b = x.shape[0]
        cfg = self.cfg
        f_ins, f_sem = self.backbone(x)

        k_ins = T.broadcast_to(
            T.reshape(self.instance_kernels, (1, *self.instance_kernels.shape)),
            (b, *self.instance_kernels.shape),
        )
        k_sem = T.broadcast_to(
            T.reshape(self.semantic_kernels, (1, *self.semantic_kernels.shape)),
            (b, *self.semantic_kernels.shape),
        )

        m0_sem = None
        if cfg.mode == "semantic":
            m0 = predict_masks(k_sem, f_sem)
            k0, feats, activation = k_sem, f_sem, SOFTMAX
        elif cfg.mode == "instance":
            m0 = predict_masks(k_ins, f_ins)
            k0, feats, activation = k_ins, f_ins + f_sem, SIGMOID
            if gts is not None:
                m0_sem = predict_masks(k_sem, f_sem)
        else:
            m0_ins = predict_masks(k_ins, f_ins)
            m0_sem = predict_masks(k_sem, f_sem)
            m0, k0, feats = build_panoptic_inputs(
                m0_ins, m0_sem, k_ins, k_sem, f_ins, f_sem, cfg.stuff_rows,
            )
            activation = SIGMOID

        if self.head is not None:
            stages = self.head.run_iterative(k0, m0, feats, activation)
        else:
            stages = [self._static_stage(k0, m0, activation)]

        if gts is None:
            return stages
        return self._training_loss(stages, m0_sem, gts, weights or LossWeights())

    def _training_loss(self, stages, m0_sem, gts, weights):
        cfg = self.cfg
        size = cfg.image_size
        layout = TaskLayout(
            mode=cfg.mode, image_size=(size, size),
            num_instance_kernels=cfg.num_instance_kernels,
            thing_class_ids=list(cfg.thing_class_ids),
            stuff_class_ids=list(cfg.stuff_class_ids),
            semantic_class_ids=cfg.semantic_class_ids,
        )
        loss, breakdown = set_prediction_loss(stages, gts, layout, weights)
        if cfg.mode == "instance" and m0_sem is not None:
            aux_maps = np.stack([aux_semantic_map(gt) for gt in gts]).reshape(len(gts), -1)
            up = T.bilinear_upsample(m0_sem, size, size)
            up = T.reshape(up, (up.shape[0], up.shape[1], size * size))
            aux = semantic_loss(up, aux_maps, cfg.semantic_class_ids)
            loss = loss + weights.lam_seg * aux
            breakdown.seg += float(aux.data)
            breakdown.total = float(loss.data)
        return stages, loss, breakdown


def aux_semantic_map(gt: GroundTruthSample) -> np.ndarray:
    """Semantic targets from instance masks alone: things on background."""
    out = np.zeros_like(gt.semantic)
    for class_id, mask in gt.instances:
        out[mask] = class_id
    return out


# ---------------------------------------------------------------------------
# inference decoding

def _upsampled_probs(stage: StageOutput, index: int) -> tuple[np.ndarray, np.ndarray]:
    # mask logits live at stride 4; decode at full resolution
    _, h, w = stage.mask_logits.data[index].shape
    logits = T.bilinear_resize_array(stage.mask_logits.data[index], 4 * h, 4 * w)
    return logits, 1.0 / (1.0 + np.exp(-logits))


def binarize_instances(stage: StageOutput, cfg: ModelConfig,
                       index: int = 0) -> list[tuple[int, float, np.ndarray]]:
    """Threshold per-kernel masks into scored instances; no suppression.

    Every kernel yields at most one instance: class = argmax class
    probability, score = that probability, mask = activated probability
    >= cfg.mask_threshold (inclusive).  Kernels scoring below
    cfg.score_floor are dropped.
    """
    if stage.class_logits is None:
        raise ContractError("instance decoding needs class predictions")
    _, probs = _upsampled_probs(stage, index)
    cls_probs = 1.0 / (1.0 + np.exp(-stage.class_logits.data[index]))
    out = []
    for n in range(cfg.num_instance_kernels):
        score = float(cls_probs[n].max())
        if score < cfg.score_floor:
            continue
        class_id = cfg.thing_class_ids[int(cls_probs[n].argmax())]
        out.append((class_id, score, probs[n] >= cfg.mask_threshold))
    return out


def merge_panoptic(stage: StageOutput, cfg: ModelConfig, index: int = 0) -> PanopticMap:
    """Paste thing and stuff masks in one mixed, score-sorted pass.

    Pixels go to the candidate maximizing score * mask probability.
    Segments that keep too little of their thresholded mask (or too few
    pixels) are deleted; their pixels fall to the next-best surviving
    candidate that still claims them at mask-threshold confidence, else
    become void.  A single cleanup pass, no cascade.
    """
    if cfg.mode != "panoptic":
        raise ContractError(f"panoptic merge called in {cfg.mode!r} mode")
    n_ins = cfg.num_instance_kernels
    logits, probs = _upsampled_probs(stage, index)
    n_total, out_h, out_w = probs.shape

    cand_class: list[int] = []
    cand_thing: list[bool] = []
    cand_score: list[float] = []
    cand_rows: list[int] = []

    cls_probs = None
    if stage.class_logits is not None:
        cls_probs = 1.0 / (1.0 + np.exp(-stage.class_logits.data[index]))
    for n in range(n_ins):
        score = float(cls_probs[n].max())
        if score < cfg.score_floor:
            continue
        cand_rows.append(n)
        cand_class.append(cfg.thing_class_ids[int(cls_probs[n].argmax())])
        cand_thing.append(True)
        cand_score.append(score)

    # stuff confidence: mean per-pixel softmax share over the thresholded
    # region, competing among the stuff channels (the distribution the
    # stuff supervision trains)
    stuff_logits = logits[n_ins:]
    exp = np.exp(stuff_logits - stuff_logits.max(axis=0, keepdims=True))
    share = exp / exp.sum(axis=0, keepdims=True)
    for j, class_id in enumerate(cfg.stuff_class_ids):
        n = n_ins + j
        if n >= n_total:
            break
        region = probs[n] >= cfg.mask_threshold
        score = float(share[j][region].mean()) if region.any() else 0.0
        if score < cfg.score_floor:
            continue
        cand_rows.append(n)
        cand_class.append(class_id)
        cand_thing.append(False)
        cand_score.append(score)

    raster = np.zeros((out_h, out_w), dtype=np.int32)
    if not cand_rows:
        return PanopticMap(raster, [])

    weighted = np.asarray(cand_score)[:, None, None] * probs[cand_rows]
    assign = weighted.argmax(axis=0)

    thresholded = probs[cand_rows] >= cfg.mask_threshold
    deleted = np.zeros(len(cand_rows), dtype=bool)
    for c in range(len(cand_rows)):
        won = assign == c
        surviving = int(np.logical_and(won, thresholded[c]).sum())
        thresh_area = int(thresholded[c].sum())
        frac = surviving / thresh_area if thresh_area else 0.0
        if surviving < cfg.min_area or frac < cfg.keep_fraction:
            deleted[c] = True

    if deleted.any():
        survivors = np.flatnonzero(~deleted)
        orphan = np.isin(assign, np.flatnonzero(deleted))
        if survivors.size:
            w_surv = weighted[survivors] * thresholded[survivors]
            best = w_surv.argmax(axis=0)
            has_claim = thresholded[survivors].any(axis=0)
            new_assign = np.where(has_claim, survivors[best], -1)
            assign = np.where(orphan, new_assign, assign)
        else:
            assign = np.where(orphan, -1, assign)

    segments: list[SegmentInfo] = []
    next_id = 1
    for c in range(len(cand_rows)):
        if deleted[c]:
            continue
        area = int((assign == c).sum())
        if area == 0:
            continue
        raster[assign == c] = next_id
        segments.append(SegmentInfo(next_id, cand_class[c], cand_thing[c],
                                    cand_score[c], area))
        next_id += 1
    return PanopticMap(raster, segments)


def semantic_raster(stage: StageOutput, cfg: ModelConfig, index: int = 0) -> np.ndarray:
    """Per-pixel argmax class over the upsampled mask channels."""
    logits, _ = _upsampled_probs(stage, index)
    ids = np.asarray(cfg.semantic_class_ids, dtype=np.int32)
    return ids[logits.argmax(axis=0)]
