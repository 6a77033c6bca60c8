"""
mAP@0.5 evaluation of a detector snapshot and export of its object-query
embeddings.
"""
import os
import logging

from collections import defaultdict
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional

import numpy as np
import pandas as pd
import torch

from datr.detector import as_predictions, query_scores
from datr.synthetic_domains import load_batches
from datr.utils import timeit
from datr.utils.batchers import collate
from datr.utils.loaders import write_json
from datr.utils.metrics import (average_precision, match_detections, mean_average_precision,
                                precision_recall)


logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    dataset: str
    domain: str
    n_images: int
    iou_threshold: float
    score_floor: float
    per_class_ap: Dict[str, Optional[float]]
    mAP: float
    n_detections: Dict[str, int]
    n_ground_truth: Dict[str, int]
    fingerprint: Optional[str] = None
    checkpoint: Optional[str] = None
    curves: Dict[str, tuple] = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self):
        report = asdict(self)
        report.pop('curves')
        return report

    def to_json(self, path):
        write_json(self.to_dict(), path, indent=2)


@timeit
def evaluate_map(model, manifest, iou_threshold=0.5, score_floor=0.05, batch_size=16,
                 fingerprint=None, checkpoint=None, keep_curves=False):
    """Computes per-class AP and mAP of ``model`` on a labeled manifest.

    Every (query, class) pair whose sigmoid score reaches ``score_floor``
    is a detection of that class. Detections are matched greedily by
    descending score to unused ground truth with IoU >= ``iou_threshold``.

    Args:
        model (nn.Module): detector snapshot, evaluated without gradient
        manifest (DatasetManifest): dataset with ground truth
        keep_curves (bool): keep per-class precision/recall arrays on the report
    Returns:
        EvalReport
    """
    if len(manifest) == 0:
        raise ValueError("Cannot evaluate on an empty dataset: {}".format(manifest.annotation_file))
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("IoU threshold must be in (0, 1], got {}".format(iou_threshold))

    n_classes = manifest.num_classes
    scores = defaultdict(list)
    hits = defaultdict(list)
    n_gt = np.zeros(n_classes, dtype=np.int64)

    training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for batch in load_batches(manifest, batch_size):
                images, targets = collate(batch)
                outputs = model(images)
                probs = outputs['pred_logits'].sigmoid().cpu().numpy().astype(np.float64)
                boxes = outputs['pred_boxes'].cpu().numpy().astype(np.float64)
                for b, target in enumerate(targets):
                    gt_boxes = target['boxes'].numpy().astype(np.float64)
                    gt_labels = target['labels'].numpy()
                    for k in range(n_classes):
                        keep = probs[b, :, k] >= score_floor
                        gt_k = gt_boxes[gt_labels == k]
                        n_gt[k] += len(gt_k)
                        if not keep.any():
                            continue
                        det_scores = probs[b, keep, k]
                        scores[k].append(det_scores)
                        hits[k].append(match_detections(boxes[b, keep], det_scores, gt_k, iou_threshold))
    finally:
        model.train(training)

    per_class_ap, n_detections, n_ground_truth, curves = {}, {}, {}, {}
    for k, name in enumerate(manifest.categories):
        class_scores = np.concatenate(scores[k]) if scores[k] else np.zeros(0)
        class_hits = np.concatenate(hits[k]) if hits[k] else np.zeros(0, dtype=bool)
        per_class_ap[name] = average_precision(class_scores, class_hits, int(n_gt[k]))
        n_detections[name] = int(len(class_scores))
        n_ground_truth[name] = int(n_gt[k])
        if keep_curves and n_gt[k] > 0 and len(class_scores):
            curves[name] = precision_recall(class_scores, class_hits, int(n_gt[k]))

    report = EvalReport(dataset=manifest.annotation_file, domain=manifest.domain.name.lower(),
                        n_images=len(manifest), iou_threshold=iou_threshold, score_floor=score_floor,
                        per_class_ap=per_class_ap, mAP=mean_average_precision(per_class_ap),
                        n_detections=n_detections, n_ground_truth=n_ground_truth,
                        fingerprint=fingerprint, checkpoint=checkpoint, curves=curves)
    logger.info("{} {}: mAP@{} = {:.2f}".format(
        manifest.split, report.domain, iou_threshold, 100 * report.mAP))
    return report


def export_query_features(model, manifests, path, max_images=200, batch_size=16):
    """Dumps (domain, predicted class, score, embedding) for every object
    query of the first ``max_images`` images of each manifest.

    Returns:
        pd.DataFrame written to ``path``
    """
    if max_images < 1:
        raise ValueError("max_images must be >= 1, got {}".format(max_images))
    frames = []
    training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for manifest in manifests:
                remaining = min(max_images, len(manifest))
                for batch in load_batches(manifest, batch_size):
                    if remaining <= 0:
                        break
                    batch = batch[:remaining]
                    remaining -= len(batch)
                    images, _ = collate(batch)
                    outputs = model(images)
                    q_scores, q_classes = query_scores(as_predictions(outputs))
                    Z = outputs['queries'].reshape(-1, outputs['queries'].shape[-1]).cpu().numpy()
                    frame = pd.DataFrame(Z, columns=['e{}'.format(i) for i in range(Z.shape[1])])
                    frame.insert(0, 'score', q_scores.flatten().cpu().numpy())
                    frame.insert(0, 'class', [manifest.categories[c] for c in q_classes.flatten().tolist()])
                    frame.insert(0, 'domain', manifest.domain.name.lower())
                    frames.append(frame)
    finally:
        model.train(training)

    features = pd.concat(frames, ignore_index=True)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        features.to_csv(path, index=False, float_format='%.8f')
    except OSError as e:
        raise OSError("Could not write query features to {}: {}".format(path, e)) from e
    logger.info("Wrote {} query embeddings to {}".format(len(features), path))
    return features
