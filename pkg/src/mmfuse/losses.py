"""Detection losses: quality focal, GIoU, L1, cross-entropy (torch, autograd-safe)."""

import torch
import torch.nn.functional as F


def quality_focal_loss(pred_logit: torch.Tensor, target: torch.Tensor, beta: float = 2.0) -> torch.Tensor:
    """|y - sigmoid(p)|^beta * BCE(sigmoid(p), y), elementwise.

    ``target`` is a soft quality label in [0, 1]; the loss vanishes where the
    prediction matches it exactly and for confident negatives.
    """
    prob = torch.sigmoid(pred_logit)
    bce = F.binary_cross_entropy_with_logits(pred_logit, target, reduction="none")
    return (target - prob).abs().pow(beta) * bce


def giou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of (..., 4) x1y1x2y2 boxes; zero-area boxes count as IoU 0."""
    px1, py1, px2, py2 = pred.unbind(-1)
    gx1, gy1, gx2, gy2 = gt.unbind(-1)
    pa = (px2 - px1).clamp(min=0) * (py2 - py1).clamp(min=0)
    ga = (gx2 - gx1).clamp(min=0) * (gy2 - gy1).clamp(min=0)
    inter = ((torch.min(px2, gx2) - torch.max(px1, gx1)).clamp(min=0)
             * (torch.min(py2, gy2) - torch.max(py1, gy1)).clamp(min=0))
    union = pa + ga - inter
    iou = inter / union.clamp(min=1e-12)
    enclose = ((torch.max(px2, gx2) - torch.min(px1, gx1)).clamp(min=0)
               * (torch.max(py2, gy2) - torch.min(py1, gy1)).clamp(min=0))
    return iou - (enclose - union) / enclose.clamp(min=1e-12)


def giou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """1 - GIoU, in [0, 2]."""
    return 1.0 - giou(pred, gt)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (pred - target).abs()


def category_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Plain softmax cross-entropy over category channels (last dim)."""
    return F.cross_entropy(logits, labels, reduction="none")
