"""Box format conversion and overlap measures (numpy and torch)."""
import numpy as np
import torch

GIOU_EPS = 1e-9


def cxcywh_to_xyxy(b):
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    parts = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    if isinstance(b, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def xyxy_to_cxcywh(b):
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    parts = ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)
    if isinstance(b, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def _area(b):
    return (b[..., 2] - b[..., 0]).clip(min=0) * (b[..., 3] - b[..., 1]).clip(min=0)


def pairwise_iou(a, b):
    """IoU matrix between xyxy boxes ``a`` (n, 4) and ``b`` (m, 4), numpy."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clip(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a)[:, None] + _area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def box_iou_giou(a, b, eps=GIOU_EPS):
    """Elementwise IoU and GIoU for aligned xyxy tensors of shape (..., 4)."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a) + _area(b) - inter
    # eps floors the denominators, so non-degenerate boxes are evaluated exactly
    iou = inter / union.clamp(min=eps)
    elt = torch.minimum(a[..., :2], b[..., :2])
    erb = torch.maximum(a[..., 2:], b[..., 2:])
    ewh = (erb - elt).clamp(min=0)
    enclose = ewh[..., 0] * ewh[..., 1]
    giou = iou - (enclose - union) / enclose.clamp(min=eps)
    return iou, giou


def pairwise_giou(a, b, eps=GIOU_EPS):
    """GIoU matrix between xyxy tensors ``a`` (n, 4) and ``b`` (m, 4)."""
    return box_iou_giou(a[:, None, :], b[None, :, :], eps)[1]
