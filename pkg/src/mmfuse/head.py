"""Center-based single-stage detection head over the unified token pyramid.

Any head that maps a pyramid to raw predictions, decodes them to scored
boxes, and scores them against annotations can be plugged in; this one keeps
desk-scale training tractable.  Per level it emits a classification heatmap
(quality-focal-loss target: IoU of the predicted box), a centerness map, a
box-regression map (left/top/right/bottom distances in units of
``stride * reg_scale`` pixels), and an auxiliary category map carrying the
cross-entropy term.

Prediction tensors take an optional leading batch dimension; the
single-sample operations are B=1 views over the batched code path.
"""

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import greedy_nms
from .encoder import _init_module
from .losses import giou_loss, quality_focal_loss
from .types import Annotation, ConfigurationError, DetectionSet, TokenGrid


class DetectionHead(Protocol):
    def forward(self, pyramid: list[TokenGrid]) -> list["LevelPrediction"]: ...

    def decode(self, preds: list["LevelPrediction"], image_hw) -> DetectionSet: ...

    def loss(self, preds: list["LevelPrediction"], annotations) -> dict[str, torch.Tensor]: ...


@dataclass
class CenterHeadConfig:
    num_classes: int = 1
    width: int = 64
    tower_depth: int = 2
    score_threshold: float = 0.05
    nms_iou: float = 0.6
    max_dets: int = 100
    prior_logit: float = -4.0
    qfl_beta: float = 2.0
    center_radius: float = 1.5
    size_ranges: tuple = ((0, 32), (32, 64), (64, 128), (128, 10 ** 9))
    reg_scale: float = 4.0
    weight_cls: float = 1.0
    weight_giou: float = 2.0
    weight_l1: float = 5.0
    weight_ce: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.score_threshold <= 1.0 and 0.0 <= self.nms_iou <= 1.0):
            raise ConfigurationError("head thresholds must lie in [0, 1]")
        if self.max_dets < 1:
            raise ConfigurationError("max_dets must be positive")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "width": self.width,
            "tower_depth": self.tower_depth,
            "score_threshold": self.score_threshold,
            "nms_iou": self.nms_iou,
            "max_dets": self.max_dets,
            "prior_logit": self.prior_logit,
            "qfl_beta": self.qfl_beta,
            "center_radius": self.center_radius,
            "size_ranges": [list(r) for r in self.size_ranges],
            "reg_scale": self.reg_scale,
            "weight_cls": self.weight_cls,
            "weight_giou": self.weight_giou,
            "weight_l1": self.weight_l1,
            "weight_ce": self.weight_ce,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CenterHeadConfig":
        d = dict(d)
        d["size_ranges"] = tuple(tuple(r) for r in d["size_ranges"])
        return cls(**d)


@dataclass
class LevelPrediction:
    """Raw per-level maps, shaped (..., C, h, w); spatial shape matches the grid."""

    cls_logits: torch.Tensor  # (..., K, h, w)
    ctr_logits: torch.Tensor  # (..., 1, h, w)
    box_raw: torch.Tensor  # (..., 4, h, w)
    cat_logits: torch.Tensor  # (..., K + 1, h, w)
    stride: int

    @property
    def grid_shape(self):
        return tuple(self.cls_logits.shape[-2:])

    def sample(self, b: int) -> "LevelPrediction":
        return LevelPrediction(
            self.cls_logits[b], self.ctr_logits[b], self.box_raw[b], self.cat_logits[b], self.stride
        )


@dataclass
class LevelTargets:
    quality: torch.Tensor  # (K, h, w) soft classification target
    box: torch.Tensor  # (4, h, w) normalized ltrb distances
    centerness: torch.Tensor  # (h, w)
    labels: torch.Tensor  # (h, w) long; 0 = background
    positive: torch.Tensor  # (h, w) bool
    valid: torch.Tensor  # (h, w) bool; False inside ignore regions


def _level_centers(h: int, w: int, stride: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    ys = (torch.arange(h, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(w, dtype=dtype) + 0.5) * stride
    return torch.meshgrid(ys, xs, indexing="ij")


def decode_boxes(pred: LevelPrediction, reg_scale: float, scale: torch.Tensor) -> torch.Tensor:
    """Raw regression (..., 4, h, w) -> boxes (..., h, w, 4) in pixels."""
    dtype = pred.box_raw.dtype
    cy, cx = _level_centers(*pred.grid_shape, pred.stride, dtype)
    dist = F.softplus(pred.box_raw) * scale * (pred.stride * reg_scale)
    left, top, right, bottom = dist.unbind(-3)
    return torch.stack((cx - left, cy - top, cx + right, cy + bottom), dim=-1)


class PyramidNeck(nn.Module):
    """Per-level linear projection mapping stage dims onto one shared width."""

    def __init__(self, stage_dims, width: int):
        super().__init__()
        self.proj = nn.ModuleList(nn.Linear(d, width) for d in stage_dims)
        self.apply(_init_module)

    def forward_levels(self, levels: list[torch.Tensor]) -> list[torch.Tensor]:
        return [self.proj[i](t) for i, t in enumerate(levels)]

    def forward(self, pyramid: list[TokenGrid]) -> list[TokenGrid]:
        return [
            TokenGrid(self.proj[i](g.tokens), g.grid_shape, g.modality, g.valid)
            for i, g in enumerate(pyramid)
        ]


class CenterHead(nn.Module):
    def __init__(self, cfg: CenterHeadConfig, in_dim: int, strides):
        super().__init__()
        self.cfg = cfg
        self.in_dim = in_dim
        self.strides = tuple(strides)
        w = cfg.width
        tower = []
        for i in range(cfg.tower_depth):
            tower += [
                nn.Conv2d(in_dim if i == 0 else w, w, 3, padding=1),
                nn.GroupNorm(min(8, w), w),
                nn.ReLU(),
            ]
        self.tower = nn.Sequential(*tower)
        self.cls_head = nn.Conv2d(w, cfg.num_classes, 3, padding=1)
        self.ctr_head = nn.Conv2d(w, 1, 3, padding=1)
        self.box_head = nn.Conv2d(w, 4, 3, padding=1)
        self.cat_head = nn.Conv2d(w, cfg.num_classes + 1, 3, padding=1)
        self.scales = nn.ParameterList(
            nn.Parameter(torch.ones(1)) for _ in self.strides
        )
        self.apply(_init_module)
        nn.init.constant_(self.cls_head.bias, cfg.prior_logit)

    # -- batched core --------------------------------------------------------

    def forward_batch(
        self, levels: list[torch.Tensor], grid_shapes: list[tuple[int, int]]
    ) -> list[LevelPrediction]:
        """Token levels (B, N, D) -> raw prediction maps (B, C, h, w)."""
        if not levels:
            raise ConfigurationError("empty pyramid")
        if any(t.shape[-1] != self.in_dim for t in levels):
            raise ConfigurationError("pyramid levels must share the head input dim")
        preds = []
        for level, (tokens, (h, w)) in enumerate(zip(levels, grid_shapes)):
            B = tokens.shape[0]
            fmap = tokens.transpose(1, 2).reshape(B, self.in_dim, h, w)
            feat = self.tower(fmap)
            preds.append(
                LevelPrediction(
                    cls_logits=self.cls_head(feat),
                    ctr_logits=self.ctr_head(feat),
                    box_raw=self.box_head(feat),
                    cat_logits=self.cat_head(feat),
                    stride=self.strides[level],
                )
            )
        return preds

    def loss_batch(
        self, preds: list[LevelPrediction], annotations: list[list[Annotation]]
    ) -> dict[str, torch.Tensor]:
        """Mean over the batch of the per-sample named losses."""
        cfg = self.cfg
        B = preds[0].cls_logits.shape[0]
        dtype = preds[0].cls_logits.dtype
        per_sample_targets = [
            self.assign_targets([p.sample(b) for p in preds], annotations[b])
            for b in range(B)
        ]
        n_pos = [
            max(1, sum(int(t.positive.sum()) for t in per_sample_targets[b]))
            for b in range(B)
        ]
        n_valid = [
            max(1, sum(int(t.valid.sum()) for t in per_sample_targets[b]))
            for b in range(B)
        ]
        pos_w = torch.tensor([1.0 / (p * B) for p in n_pos], dtype=dtype)
        val_w = torch.tensor([1.0 / (v * B) for v in n_valid], dtype=dtype)

        zero = torch.zeros((), dtype=dtype)
        qfl = zero.clone()
        ctr = zero.clone()
        giou_term = zero.clone()
        l1 = zero.clone()
        ce = zero.clone()
        for level, pred in enumerate(preds):
            tgts = [per_sample_targets[b][level] for b in range(B)]
            quality = torch.stack([t.quality for t in tgts])  # (B, K, h, w)
            box_t = torch.stack([t.box for t in tgts])  # (B, 4, h, w)
            centerness = torch.stack([t.centerness for t in tgts])  # (B, h, w)
            labels = torch.stack([t.labels for t in tgts])  # (B, h, w)
            positive = torch.stack([t.positive for t in tgts])  # (B, h, w)
            valid = torch.stack([t.valid for t in tgts])  # (B, h, w)

            qfl_map = quality_focal_loss(pred.cls_logits, quality, cfg.qfl_beta)
            qfl = qfl + (
                qfl_map * valid[:, None].to(dtype) * pos_w[:, None, None, None]
            ).sum()
            ce_map = F.cross_entropy(pred.cat_logits, labels, reduction="none")
            ce = ce + (ce_map * valid.to(dtype) * val_w[:, None, None]).sum()

            if positive.any():
                bidx, yidx, xidx = positive.nonzero(as_tuple=True)
                wts = pos_w[bidx]
                ctr_vals = F.binary_cross_entropy_with_logits(
                    pred.ctr_logits[bidx, 0, yidx, xidx],
                    centerness[bidx, yidx, xidx],
                    reduction="none",
                )
                ctr = ctr + (ctr_vals * wts).sum()
                decoded = decode_boxes(pred, cfg.reg_scale, self.scales[level])
                norm = pred.stride * cfg.reg_scale
                cy, cx = _level_centers(*pred.grid_shape, pred.stride, dtype)
                gt_boxes = torch.stack(
                    (
                        cx - box_t[:, 0] * norm,
                        cy - box_t[:, 1] * norm,
                        cx + box_t[:, 2] * norm,
                        cy + box_t[:, 3] * norm,
                    ),
                    dim=-1,
                )  # (B, h, w, 4)
                giou_vals = giou_loss(decoded[bidx, yidx, xidx], gt_boxes[bidx, yidx, xidx])
                giou_term = giou_term + (giou_vals * wts).sum()
                pred_norm = F.softplus(pred.box_raw) * self.scales[level]
                l1_vals = (pred_norm - box_t).abs()[bidx, :, yidx, xidx].sum(dim=1)
                l1 = l1 + (l1_vals * wts).sum()

        out = {
            "quality_focal": qfl,
            "centerness": ctr,
            "giou": giou_term,
            "l1": l1,
            "cross_entropy": ce,
        }
        out["total"] = (
            cfg.weight_cls * (out["quality_focal"] + out["centerness"])
            + cfg.weight_giou * out["giou"]
            + cfg.weight_l1 * out["l1"]
            + cfg.weight_ce * out["cross_entropy"]
        )
        return out

    # -- single-sample views ---------------------------------------------------

    def forward(self, pyramid: list[TokenGrid]) -> list[LevelPrediction]:
        if not pyramid:
            raise ConfigurationError("empty pyramid")
        levels = [g.tokens.unsqueeze(0) for g in pyramid]
        shapes = [g.grid_shape for g in pyramid]
        return [p.sample(0) for p in self.forward_batch(levels, shapes)]

    def loss(
        self, preds: list[LevelPrediction], annotations: list[Annotation]
    ) -> dict[str, torch.Tensor]:
        """Named loss terms; regression terms are zero when there is no GT."""
        batched = [
            LevelPrediction(
                p.cls_logits.unsqueeze(0),
                p.ctr_logits.unsqueeze(0),
                p.box_raw.unsqueeze(0),
                p.cat_logits.unsqueeze(0),
                p.stride,
            )
            for p in preds
        ]
        return self.loss_batch(batched, [annotations])

    def assign_targets(
        self, preds: list[LevelPrediction], annotations: list[Annotation]
    ) -> list[LevelTargets]:
        """Center-sampling assignment with smallest-area tie-break.

        A location is positive when it lies inside a ground-truth box assigned
        to its level by box scale (max side within the level's size range) and
        within ``center_radius`` strides of the box center.  The soft
        classification target is the IoU between the currently predicted box
        at that location and its ground truth.
        """
        cfg = self.cfg
        targets = []
        real = [a for a in annotations if not a.is_ignore]
        ignores = [a for a in annotations if a.is_ignore]
        for level, pred in enumerate(preds):
            h, w = pred.grid_shape
            dtype = pred.box_raw.dtype
            cy, cx = _level_centers(h, w, pred.stride, dtype)
            lo, hi = cfg.size_ranges[level]
            norm = pred.stride * cfg.reg_scale
            assigned = torch.full((h, w), -1, dtype=torch.long)
            best_area = torch.full((h, w), math.inf, dtype=dtype)
            for gi, ann in enumerate(real):
                x1, y1, x2, y2 = ann.box
                side = max(x2 - x1, y2 - y1)
                if not (lo <= side < hi):
                    continue
                gcx, gcy = (x1 + x2) / 2, (y1 + y2) / 2
                inside = (cx > x1) & (cx < x2) & (cy > y1) & (cy < y2)
                near = ((cx - gcx).abs() <= cfg.center_radius * pred.stride) & (
                    (cy - gcy).abs() <= cfg.center_radius * pred.stride
                )
                area = (x2 - x1) * (y2 - y1)
                take = inside & near & (area < best_area)
                assigned[take] = gi
                best_area[take] = area

            positive = assigned >= 0
            box_t = torch.zeros(4, h, w, dtype=dtype)
            centerness = torch.zeros(h, w, dtype=dtype)
            labels = torch.zeros(h, w, dtype=torch.long)
            quality = torch.zeros(cfg.num_classes, h, w, dtype=dtype)
            if positive.any():
                with torch.no_grad():
                    decoded = decode_boxes(pred, cfg.reg_scale, self.scales[level])
                attrs = torch.tensor(
                    [[*a.box, a.category] for a in real], dtype=dtype
                )
                safe = assigned.clamp(min=0)
                gx1, gy1, gx2, gy2 = (attrs[safe, i] for i in range(4))
                pos_f = positive.to(dtype)
                left, top = cx - gx1, cy - gy1
                right, bottom = gx2 - cx, gy2 - cy
                box_t = torch.stack((left, top, right, bottom)) / norm * pos_f
                lr_min = torch.minimum(left, right)
                lr_max = torch.maximum(left, right)
                tb_min = torch.minimum(top, bottom)
                tb_max = torch.maximum(top, bottom)
                ctr_map = torch.sqrt(
                    (lr_min / lr_max).clamp(min=0) * (tb_min / tb_max).clamp(min=0)
                )
                centerness = torch.where(positive, ctr_map, centerness)
                labels = torch.where(positive, attrs[safe, 4].long() + 1, labels)
                px1, py1, px2, py2 = decoded.unbind(-1)
                inter = (torch.minimum(px2, gx2) - torch.maximum(px1, gx1)).clamp(min=0) * (
                    torch.minimum(py2, gy2) - torch.maximum(py1, gy1)
                ).clamp(min=0)
                pa = (px2 - px1).clamp(min=0) * (py2 - py1).clamp(min=0)
                union = pa + (gx2 - gx1) * (gy2 - gy1) - inter
                iou = torch.where(union > 0, inter / union, torch.zeros((), dtype=dtype))
                for k in range(cfg.num_classes):
                    hit = positive & (labels == k + 1)
                    quality[k] = torch.where(hit, iou, quality[k])

            valid = torch.ones(h, w, dtype=torch.bool)
            for ann in ignores:
                x1, y1, x2, y2 = ann.box
                valid &= ~((cx > x1) & (cx < x2) & (cy > y1) & (cy < y2))
            valid |= positive
            targets.append(LevelTargets(quality, box_t, centerness, labels, positive, valid))
        return targets

    @torch.no_grad()
    def decode(
        self, preds: list[LevelPrediction], image_hw: tuple[int, int] | None = None
    ) -> DetectionSet:
        """Score-threshold, per-category greedy NMS, keep the top max_dets."""
        cfg = self.cfg
        all_boxes, all_scores, all_cats = [], [], []
        for level, pred in enumerate(preds):
            boxes = decode_boxes(pred, cfg.reg_scale, self.scales[level])
            score = torch.sqrt(
                torch.sigmoid(pred.cls_logits) * torch.sigmoid(pred.ctr_logits)
            )  # (K, h, w)
            for k in range(cfg.num_classes):
                sel = score[k] > cfg.score_threshold
                if not sel.any():
                    continue
                b = boxes[sel].double().numpy()
                if image_hw is not None:
                    hh, ww = image_hw
                    b[:, 0::2] = b[:, 0::2].clip(0.0, float(ww))
                    b[:, 1::2] = b[:, 1::2].clip(0.0, float(hh))
                all_boxes.append(b)
                all_scores.append(score[k][sel].double().numpy())
                all_cats.append(np.full(len(b), k, dtype=np.int64))
        if not all_boxes:
            return DetectionSet.empty()
        boxes = np.concatenate(all_boxes)
        scores = np.concatenate(all_scores)
        cats = np.concatenate(all_cats)
        keep_all = []
        for k in np.unique(cats):
            members = np.flatnonzero(cats == k)
            kept = greedy_nms(boxes[members], scores[members], cfg.nms_iou)
            keep_all.extend(members[kept])
        keep_all = np.array(sorted(keep_all, key=lambda i: -scores[i]))[: cfg.max_dets]
        return DetectionSet(boxes[keep_all], scores[keep_all], cats[keep_all])
