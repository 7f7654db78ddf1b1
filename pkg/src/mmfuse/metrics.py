"""Detection metric suite: COCO AP, log-average miss rate, Jaccard index.

All three consume per-image detections (DetectionSet) and ground truths
(lists of Annotation) and sort internally; input order never matters.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .boxes import box_iou
from .types import Annotation, DetectionSet

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
FPPI_POINTS = np.logspace(-2.0, 0.0, 9)
MISS_RATE_FLOOR = 1e-10


@dataclass
class MetricReport:
    ap: float
    ap50: float
    mr2: float
    ji: float
    per_dataset: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "mr2": self.mr2,
            "ji": self.ji,
            "per_dataset": self.per_dataset,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)


def _sorted_dets(dets: DetectionSet, category: int, max_dets: int | None = None):
    sel = dets.categories == category
    boxes, scores = dets.boxes[sel], dets.scores[sel]
    order = np.argsort(-scores, kind="stable")
    if max_dets is not None:
        order = order[:max_dets]
    return boxes[order], scores[order]


def _split_gts(gts: list[Annotation], category: int):
    keep = [g for g in gts if g.category == category]
    real = [g for g in keep if not g.is_ignore]
    ignore = [g for g in keep if g.is_ignore]
    return real, ignore


def _match_image(det_boxes, real, ignore, thr):
    """Greedy score-descending matching at one IoU threshold.

    Returns per-detection flags (tp, ignored); each real GT matches at most
    once, and a detection falling on an ignore region is dropped from both
    counters.
    """
    n = len(det_boxes)
    tp = np.zeros(n, dtype=bool)
    ig = np.zeros(n, dtype=bool)
    gt_boxes = np.array([g.box for g in real + ignore], dtype=np.float64).reshape(-1, 4)
    if n == 0:
        return tp, ig
    ious = box_iou(det_boxes, gt_boxes) if len(gt_boxes) else np.zeros((n, 0))
    taken = np.zeros(len(real), dtype=bool)
    for d in range(n):
        best, best_iou = -1, thr
        for g in range(len(real)):
            if taken[g]:
                continue
            if ious[d, g] >= best_iou:
                if ious[d, g] > best_iou or best == -1:
                    best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            tp[d] = True
            continue
        for g in range(len(real), len(gt_boxes)):
            if ious[d, g] >= thr:
                ig[d] = True
                break
    return tp, ig


def coco_ap(
    dets: list[DetectionSet],
    gts: list[list[Annotation]],
    categories=(0,),
    max_dets: int = 100,
) -> tuple[float, float]:
    """COCO protocol AP: IoU 0.5:0.95, 101-point interpolation, maxDets cap.

    Returns (ap, ap50).  Images with no ground truth still contribute false
    positives; with no ground truth anywhere the score is defined as 0.
    """
    if len(dets) != len(gts):
        raise ValueError("detections and ground truths disagree on image count")
    ap_per_cat, ap50_per_cat = [], []
    for cat in categories:
        per_image = []
        n_gt = 0
        for det_set, gt_list in zip(dets, gts):
            boxes, scores = _sorted_dets(det_set, cat, max_dets)
            real, ignore = _split_gts(gt_list, cat)
            n_gt += len(real)
            per_image.append((boxes, scores, real, ignore))
        if n_gt == 0:
            ap_per_cat.append(0.0)
            ap50_per_cat.append(0.0)
            continue
        ap_by_thr = []
        for thr in IOU_THRESHOLDS:
            scores_all, tp_all = [], []
            for boxes, scores, real, ignore in per_image:
                tp, ig = _match_image(boxes, real, ignore, thr)
                scores_all.append(scores[~ig])
                tp_all.append(tp[~ig])
            scores_all = np.concatenate(scores_all) if scores_all else np.zeros(0)
            tp_all = np.concatenate(tp_all) if tp_all else np.zeros(0, dtype=bool)
            order = np.argsort(-scores_all, kind="stable")
            tp_sorted = tp_all[order]
            tp_cum = np.cumsum(tp_sorted)
            fp_cum = np.cumsum(~tp_sorted)
            recall = tp_cum / n_gt
            precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
            if len(precision) == 0:
                ap_by_thr.append(0.0)
                continue
            # monotone envelope, then sample at the 101 recall points
            for i in range(len(precision) - 2, -1, -1):
                precision[i] = max(precision[i], precision[i + 1])
            idx = np.searchsorted(recall, RECALL_POINTS, side="left")
            sampled = np.where(
                idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0
            )
            ap_by_thr.append(float(sampled.mean()))
        ap_per_cat.append(float(np.mean(ap_by_thr)))
        ap50_per_cat.append(ap_by_thr[0])
    return float(np.mean(ap_per_cat)), float(np.mean(ap50_per_cat))


def log_average_miss_rate(
    dets: list[DetectionSet],
    gts: list[list[Annotation]],
    category: int = 0,
    iou_thr: float = 0.5,
) -> float:
    """MR^-2: geometric mean of miss rates sampled at 9 log-spaced FPPI points.

    Every distinct detection score is an operating point; for each reference
    FPPI the most permissive operating point with FPPI <= reference supplies
    the miss rate (1.0 if none qualifies).  Miss rates are floored at 1e-10
    before the log.
    """
    n_images = len(dets)
    if n_images != len(gts):
        raise ValueError("detections and ground truths disagree on image count")
    per_image = []
    n_gt = 0
    for det_set, gt_list in zip(dets, gts):
        boxes, scores = _sorted_dets(det_set, category)
        real, ignore = _split_gts(gt_list, category)
        n_gt += len(real)
        per_image.append((boxes, scores, real, ignore))
    if n_gt == 0:
        raise ValueError("miss rate undefined: no ground-truth boxes")

    thresholds = np.unique(np.concatenate([s for _, s, _, _ in per_image] or [np.zeros(0)]))[::-1]
    ops = []  # (fppi, miss_rate) per operating point, most permissive last
    for t in thresholds:
        tp_total = fp_total = 0
        for boxes, scores, real, ignore in per_image:
            keep = scores >= t
            tp, ig = _match_image(boxes[keep], real, ignore, iou_thr)
            tp_total += int(tp.sum())
            fp_total += int((~tp & ~ig).sum())
        ops.append((fp_total / n_images, 1.0 - tp_total / n_gt))

    samples = []
    for ref in FPPI_POINTS:
        eligible = [mr for fppi, mr in ops if fppi <= ref]
        samples.append(min(eligible) if eligible else 1.0)
    samples = np.maximum(samples, MISS_RATE_FLOOR)
    return float(np.exp(np.mean(np.log(samples))))


def _max_matching(det_boxes, gt_boxes, iou_thr: float) -> int:
    adjacency = box_iou(det_boxes, gt_boxes) >= iou_thr
    if not adjacency.any():
        return 0
    match = maximum_bipartite_matching(csr_matrix(adjacency), perm_type="column")
    return int((match >= 0).sum())


def jaccard_index(
    dets: list[DetectionSet],
    gts: list[list[Annotation]],
    category: int = 0,
    iou_thr: float = 0.5,
) -> float:
    """Mean over images of |M| / (|D| + |G| - |M|) under maximum matching at IoU 0.5."""
    if len(dets) != len(gts):
        raise ValueError("detections and ground truths disagree on image count")
    scores = []
    for det_set, gt_list in zip(dets, gts):
        boxes, _ = _sorted_dets(det_set, category)
        real, _ = _split_gts(gt_list, category)
        nd, ng = len(boxes), len(real)
        if nd + ng == 0:
            continue
        gt_boxes = np.array([g.box for g in real], dtype=np.float64).reshape(-1, 4)
        m = _max_matching(boxes, gt_boxes, iou_thr) if nd and ng else 0
        scores.append(m / (nd + ng - m))
    return float(np.mean(scores)) if scores else 0.0


def best_jaccard_index(
    dets: list[DetectionSet],
    gts: list[list[Annotation]],
    category: int = 0,
    iou_thr: float = 0.5,
    score_grid=tuple(np.linspace(0.05, 0.95, 19)),
) -> float:
    """JI at the best score threshold (the usual crowd-benchmark reporting)."""

    def thresholded(det_set: DetectionSet, t: float) -> DetectionSet:
        keep = det_set.scores >= t
        return DetectionSet(det_set.boxes[keep], det_set.scores[keep], det_set.categories[keep])

    return max(
        jaccard_index([thresholded(d, t) for d in dets], gts, category, iou_thr)
        for t in score_grid
    )
