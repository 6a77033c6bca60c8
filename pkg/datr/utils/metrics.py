import logging

import numpy as np

from datr.utils.box_ops import numpy_box_iou


logger = logging.getLogger(__name__)


def match_detections(det_boxes, det_scores, gt_boxes, iou_threshold=0.5):
    """Greedy score-ordered matching of one image and one class.

    Each detection, from the highest score down, takes the unused ground
    truth box it overlaps most, provided IoU >= iou_threshold.

    Returns:
        boolean array (in the input detection order), True for true positives
    """
    det_scores = np.asarray(det_scores, dtype=np.float64)
    tp = np.zeros(len(det_scores), dtype=bool)
    if len(det_scores) == 0 or len(gt_boxes) == 0:
        return tp
    ious = numpy_box_iou(det_boxes, gt_boxes)
    used = np.zeros(len(gt_boxes), dtype=bool)
    for i in np.argsort(-det_scores, kind='mergesort'):
        candidates = np.where(used, -1.0, ious[i])
        j = int(np.argmax(candidates))
        if candidates[j] >= iou_threshold:
            used[j] = True
            tp[i] = True
    return tp


def precision_recall(scores, tp, n_gt):
    """Precision/recall curve of detections pooled over a dataset."""
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    order = np.argsort(-scores, kind='mergesort')
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / float(n_gt)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    return precision, recall


def average_precision(scores, tp, n_gt):
    """All-point interpolated average precision.

    Returns:
        AP in [0, 1], or None when the class has no ground truth
    """
    if n_gt == 0:
        return None
    if len(scores) == 0:
        return 0.0
    precision, recall = precision_recall(scores, tp, n_gt)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    # precision envelope
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def mean_average_precision(per_class_ap):
    """Unweighted mean over the classes that have ground truth."""
    values = [ap for ap in per_class_ap.values() if ap is not None]
    if not values:
        return 0.0
    return float(np.mean(values))
