"""
Modules to compute the matching cost and solve the corresponding
linear sum assignment problem between queries and ground truth.
"""
import logging

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from datr.utils.box_ops import (box_cxcywh_to_xyxy, generalized_box_iou,
                                elementwise_generalized_box_iou)


logger = logging.getLogger(__name__)


def giou(box_a, box_b):
    """Generalized IoU of aligned (cx, cy, w, h) boxes; giou(a, a) == 1."""
    box_a = torch.as_tensor(box_a)
    box_b = torch.as_tensor(box_b, dtype=box_a.dtype)
    return elementwise_generalized_box_iou(box_cxcywh_to_xyxy(box_a), box_cxcywh_to_xyxy(box_b))


def solve_assignment(cost_matrix):
    """Minimum-cost one-to-one assignment of a (possibly rectangular) matrix.

    Returns:
        (row indices, column indices) as int64 tensors, min(rows, cols) pairs
    """
    cost = np.asarray(torch.as_tensor(cost_matrix).detach().cpu(), dtype=np.float64)
    if cost.size == 0:
        empty = torch.zeros(0, dtype=torch.int64)
        return empty, empty.clone()
    rows, cols = linear_sum_assignment(cost)
    return torch.as_tensor(rows, dtype=torch.int64), torch.as_tensor(cols, dtype=torch.int64)


class HungarianMatcher():
    """This class computes an assignment between the targets and the predictions of the network

    The targets don't include a no-object class, so in general there are more
    queries than targets: the best queries are matched 1-to-1 and the
    others are treated as non-objects.
    """

    def __init__(self, cost_class=2.0, cost_bbox=5.0, cost_giou=2.0,
                 focal_alpha=0.25, focal_gamma=2.0):
        """Creates the matcher

        Params:
            cost_class: weight of the focal classification cost
            cost_bbox: weight of the L1 error of the box coordinates
            cost_giou: weight of the (negated) generalized IoU
        """
        if cost_class == 0 and cost_bbox == 0 and cost_giou == 0:
            raise ValueError("all costs cant be 0")
        self.cost_class = cost_class
        self.cost_bbox = cost_bbox
        self.cost_giou = cost_giou
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma

    @torch.no_grad()
    def cost_matrix(self, class_logits, boxes, tgt_labels, tgt_boxes):
        """ Matching cost of one image, shape [num_queries, num_targets] """
        out_prob = class_logits.sigmoid()
        alpha, gamma = self.focal_alpha, self.focal_gamma
        neg_cost = (1 - alpha) * (out_prob ** gamma) * (-(1 - out_prob + 1e-8).log())
        pos_cost = alpha * ((1 - out_prob) ** gamma) * (-(out_prob + 1e-8).log())
        cost_class = pos_cost[:, tgt_labels] - neg_cost[:, tgt_labels]

        cost_bbox = torch.cdist(boxes, tgt_boxes, p=1)
        cost_giou = -generalized_box_iou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(tgt_boxes))

        return self.cost_bbox * cost_bbox + self.cost_class * cost_class + self.cost_giou * cost_giou

    @torch.no_grad()
    def __call__(self, predictions, targets):
        """ Performs the matching

        Params:
            predictions: Predictions with class_logits [B, N, C] and boxes [B, N, 4]
            targets: list of B dicts with "labels" [M] and "boxes" [M, 4]

        Returns:
            A list of size B of tuples (query indices, target indices) with
            len == min(N, num_targets)
        """
        matches = []
        for b, target in enumerate(targets):
            if len(target['labels']) == 0:
                empty = torch.zeros(0, dtype=torch.int64)
                matches.append((empty, empty.clone()))
                continue
            cost = self.cost_matrix(predictions.class_logits[b], predictions.boxes[b],
                                    target['labels'], target['boxes'].to(predictions.boxes.dtype))
            matches.append(solve_assignment(cost))
        return matches


def hungarian_match(predictions, ground_truth, matcher=None):
    return (matcher or HungarianMatcher())(predictions, ground_truth)
