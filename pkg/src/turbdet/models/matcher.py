"""One-to-one assignment of predictions to ground-truth boxes."""
import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from ..boxes import cxcywh_to_xyxy, pairwise_giou

COST_BOX = 5.0
COST_GIOU = 2.0
COST_CLASS = 2.0


def matching_cost(probs, pred_boxes, gt_labels, gt_boxes, cost_box=COST_BOX, cost_giou=COST_GIOU,
                  cost_class=COST_CLASS):
    """(Q, G) cost: weighted L1 box distance + (1 - GIoU) + (1 - p[class])."""
    l1 = torch.cdist(pred_boxes, gt_boxes, p=1)
    giou = pairwise_giou(cxcywh_to_xyxy(pred_boxes), cxcywh_to_xyxy(gt_boxes))
    cls = 1.0 - probs[:, gt_labels]
    return cost_box * l1 + cost_giou * (1.0 - giou) + cost_class * cls


@torch.no_grad()
def match(probs, pred_boxes, gt_labels, gt_boxes, **weights):
    """Minimum-cost assignment; returns (query_idx, gt_idx) int64 arrays sorted by query.

    Among equal-cost assignments the lowest query indices win. Raises when
    there are more ground-truth boxes than queries.
    """
    Q, G = pred_boxes.shape[0], gt_boxes.shape[0]
    if G > Q:
        raise ValueError(f"{G} ground-truth boxes exceed {Q} queries")
    if G == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    cost = matching_cost(probs, pred_boxes, gt_labels, gt_boxes, **weights)
    rows, cols = linear_sum_assignment(cost.detach().cpu().double().numpy())
    order = np.argsort(rows)
    return rows[order].astype(np.int64), cols[order].astype(np.int64)


def match_cost_matrix(cost):
    """Assignment for a precomputed (Q, G) cost matrix (numpy)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape[1] > cost.shape[0]:
        raise ValueError(f"{cost.shape[1]} ground-truth boxes exceed {cost.shape[0]} queries")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    return rows[order].astype(np.int64), cols[order].astype(np.int64)
