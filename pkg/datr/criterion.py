"""
Supervised set-prediction loss: sigmoid focal classification over every
query plus L1 and GIoU box terms over Hungarian-matched pairs.
"""
import logging

import torch
import torch.nn.functional as F

from datr.detector import Predictions
from datr.matcher import HungarianMatcher
from datr.utils.box_ops import box_cxcywh_to_xyxy, elementwise_generalized_box_iou


logger = logging.getLogger(__name__)

DEFAULT_LOSS_WEIGHTS = {'classification': 1.0, 'box_l1': 5.0, 'box_giou': 2.0}


def sigmoid_focal_loss(logits, targets, num_boxes, alpha=0.25, gamma=2.0):
    """Focal loss over independent per-class sigmoids, summed and divided
    by the number of ground-truth boxes. Negatives are down-weighted by
    (1 - alpha) and by the modulating factor p ** gamma.
    """
    prob = logits.sigmoid()
    ce_loss = F.binary_cross_entropy_with_logits(logits, targets, reduction='none')
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce_loss * ((1 - p_t) ** gamma)
    if alpha >= 0:
        alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
        loss = alpha_t * loss
    return loss.sum() / num_boxes


def _num_boxes(targets):
    return max(float(sum(len(t['labels']) for t in targets)), 1.0)


def detection_loss(predictions, ground_truth, match, focal_alpha=0.25, focal_gamma=2.0):
    """Unweighted loss components of one decoding output.

    Args:
        predictions (Predictions): class_logits [B, N, C], boxes [B, N, 4]
        ground_truth (list): B dicts with 'labels' and 'boxes'
        match (list): per-image (query indices, target indices)
    Returns:
        dict with 'classification', 'box_l1' and 'box_giou' scalars
    """
    logits, boxes = predictions.class_logits, predictions.boxes
    num_boxes = _num_boxes(ground_truth)

    batch_idx = torch.cat([torch.full_like(q, b) for b, (q, _) in enumerate(match)])
    query_idx = torch.cat([q for q, _ in match])
    target_classes = torch.cat([t['labels'][g] for t, (_, g) in zip(ground_truth, match)])

    onehot = torch.zeros_like(logits)
    onehot[batch_idx, query_idx, target_classes] = 1
    loss_ce = sigmoid_focal_loss(logits, onehot, num_boxes, focal_alpha, focal_gamma)

    if len(query_idx) == 0:
        zero = boxes.sum() * 0
        return {'classification': loss_ce, 'box_l1': zero, 'box_giou': zero.clone()}

    src_boxes = boxes[batch_idx, query_idx]
    tgt_boxes = torch.cat([t['boxes'][g] for t, (_, g) in zip(ground_truth, match)]).to(src_boxes.dtype)
    loss_bbox = F.l1_loss(src_boxes, tgt_boxes, reduction='none').sum() / num_boxes
    loss_giou = (1 - elementwise_generalized_box_iou(box_cxcywh_to_xyxy(src_boxes),
                                                     box_cxcywh_to_xyxy(tgt_boxes))).sum() / num_boxes
    return {'classification': loss_ce, 'box_l1': loss_bbox, 'box_giou': loss_giou}


class SetCriterion():
    """Computes the weighted detection loss of a model output, including
    the auxiliary decoding losses of the intermediate decoder layers.
    """

    def __init__(self, matcher=None, weight_dict=None, focal_alpha=0.25, focal_gamma=2.0,
                 aux_loss=True):
        self.matcher = matcher or HungarianMatcher(focal_alpha=focal_alpha, focal_gamma=focal_gamma)
        self.weight_dict = dict(weight_dict or DEFAULT_LOSS_WEIGHTS)
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.aux_loss = aux_loss

    def weighted(self, components):
        return sum(self.weight_dict[k] * v for k, v in components.items())

    def __call__(self, outputs, targets, match=None):
        """
        Returns:
            (total weighted loss, dict of final-layer components, match)
        """
        predictions = Predictions(outputs['pred_logits'], outputs['pred_boxes'])
        if match is None:
            match = self.matcher(predictions, targets)
        components = detection_loss(predictions, targets, match, self.focal_alpha, self.focal_gamma)
        total = self.weighted(components)

        if self.aux_loss:
            for aux in outputs.get('aux_outputs', []):
                aux_predictions = Predictions(aux['pred_logits'], aux['pred_boxes'])
                aux_match = self.matcher(aux_predictions, targets)
                total = total + self.weighted(detection_loss(aux_predictions, targets, aux_match,
                                                             self.focal_alpha, self.focal_gamma))
        return total, components, match
