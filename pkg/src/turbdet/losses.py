"""Training objectives: restoration (Charbonnier) and detection (L1, GIoU, label)."""
import logging
from dataclasses import dataclass

import torch

from .boxes import box_iou_giou, cxcywh_to_xyxy

log = logging.getLogger(__name__)

CHARBONNIER_EPS = 1e-3
LABEL_GAMMA = 2.0
LABEL_ALPHA = 0.25
PROB_CLAMP = 1e-7

DEFAULT_DETECT_WEIGHTS = (5.0, 2.0, 2.0)


def charbonnier(x, y, eps=CHARBONNIER_EPS):
    """Mean of ``sqrt((x - y)^2 + eps^2)`` over all elements."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return torch.sqrt((x - y) ** 2 + eps * eps).mean()


def giou_loss(box_a, box_b, reduction="mean"):
    """``1 - GIoU`` for aligned cxcywh boxes."""
    _, giou = box_iou_giou(cxcywh_to_xyxy(box_a), cxcywh_to_xyxy(box_b))
    loss = 1.0 - giou
    if reduction == "none":
        return loss
    if loss.numel() == 0:
        return loss.sum()
    return loss.mean()


def box_l1(pred, gt):
    """Mean absolute error over (cx, cy, w, h) of matched pairs; 0 if none."""
    if pred.numel() == 0:
        log.warning("box_l1 called with no matched pairs")
        return pred.sum()
    return (pred - gt).abs().mean()


def label_loss(p, iou, positive, gamma=LABEL_GAMMA, alpha=LABEL_ALPHA, detach_target=True):
    """IoU-aware binary cross-entropy over queries.

    ``p`` holds confidences of shape (Q,) or (Q, K); ``iou`` and ``positive``
    broadcast against it. Positive entries are pushed towards the soft target
    ``t = p^alpha * iou^(1 - alpha)`` (``p`` is detached inside ``t`` unless
    ``detach_target`` is false);
    negative entries contribute ``p^gamma * log(1 - p)``. The sum is divided
    by the number of queries (matched plus unmatched).
    """
    if p.numel() == 0:
        raise ValueError("label_loss needs at least one query")
    p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    positive = torch.as_tensor(positive, dtype=torch.bool, device=p.device).expand_as(p)
    iou = torch.as_tensor(iou, dtype=p.dtype, device=p.device).clamp(0.0, 1.0).expand_as(p)
    t = (p.detach() if detach_target else p) ** alpha * iou ** (1.0 - alpha)
    pos_term = t * torch.log(p) + (1.0 - t) * torch.log1p(-p)
    neg_term = p ** gamma * torch.log1p(-p)
    total = torch.where(positive, pos_term, neg_term).sum()
    return -total / p.shape[0]


@dataclass
class LossBreakdown:
    loss_turb: float = 0.0
    l_boxes: float = 0.0
    l_giou: float = 0.0
    l_labels: float = 0.0
    loss_detect: float = 0.0
    w_box: float = DEFAULT_DETECT_WEIGHTS[0]
    w_giou: float = DEFAULT_DETECT_WEIGHTS[1]
    w_lab: float = DEFAULT_DETECT_WEIGHTS[2]

    def as_record(self):
        return {k: float(v) for k, v in self.__dict__.items()}


def aggregate(loss_turb=0.0, l_boxes=0.0, l_giou=0.0, l_labels=0.0, weights=DEFAULT_DETECT_WEIGHTS):
    """Fill a :class:`LossBreakdown`; returns it with the weighted detection sum.

    Tensor inputs stay tensors so the caller can backpropagate through
    ``loss_detect``.
    """
    w_box, w_giou, w_lab = weights
    loss_detect = w_box * l_boxes + w_giou * l_giou + w_lab * l_labels
    return LossBreakdown(loss_turb, l_boxes, l_giou, l_labels, loss_detect, w_box, w_giou, w_lab)
