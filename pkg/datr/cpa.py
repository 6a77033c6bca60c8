"""
Class-wise prototypes alignment.

Prototypes are per-batch class centroids of decoder query embeddings,
grouped by predicted category through a one-hot class mask. A per-vector
discriminator behind a gradient reversal layer tries to tell source from
target prototypes; the reversed gradient pushes the detector toward
domain-invariant queries. Classes absent from a batch never reach the
discriminator.
"""
import logging

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import Function

from datr.detector import argmax_class, query_scores
from datr.synthetic_domains import DomainLabel


logger = logging.getLogger(__name__)

FILTER_MODES = ('none', 'confidence', 'matching')


@dataclass
class ClassPrototypes:
    values: torch.Tensor
    counts: torch.Tensor
    present: torch.Tensor
    domain: DomainLabel = DomainLabel.SOURCE

    @property
    def num_classes(self):
        return self.values.shape[0]


class GradientReversal(Function):

    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


def grl(x, scale=1.0):
    """Identity forward, gradient multiplied by -scale backward."""
    return GradientReversal.apply(x, scale)


def build_class_mask(pred_classes, num_classes):
    """One-hot class mask of shape (B*N) x C from B x N predicted classes."""
    flat = pred_classes.reshape(-1).long()
    if len(flat) and (flat.min() < 0 or flat.max() >= num_classes):
        raise ValueError("Predicted classes must lie in [0, {}), got range [{}, {}]".format(
            num_classes, int(flat.min()), int(flat.max())))
    return F.one_hot(flat, num_classes)


def extract_prototypes_batched(Z, mask, domain=DomainLabel.SOURCE):
    """Class centroids with one matrix product and a broadcast division.

    Args:
        Z (torch.Tensor): query embeddings, B x N x d (or M x d)
        mask (torch.Tensor): (B*N) x C one-hot class mask
    """
    d = Z.shape[-1]
    Z_flat = Z.reshape(-1, d)
    if mask.shape[0] != Z_flat.shape[0]:
        raise ValueError("Mask has {} rows for {} queries".format(mask.shape[0], Z_flat.shape[0]))
    mask = mask.to(Z_flat.dtype)
    counts = mask.sum(dim=0)
    values = (mask.t() @ Z_flat) / counts.clamp(min=1).unsqueeze(1)
    counts = counts.round().long()
    return ClassPrototypes(values=values, counts=counts, present=counts > 0,
                           domain=DomainLabel.parse(domain))


def extract_prototypes_naive(Z, pred_classes, num_classes, domain=DomainLabel.SOURCE):
    """Per-class loop reference implementation of extract_prototypes_batched."""
    d = Z.shape[-1]
    Z_flat = Z.reshape(-1, d)
    flat = pred_classes.reshape(-1)
    values = Z_flat.new_zeros(num_classes, d)
    counts = torch.zeros(num_classes, dtype=torch.long)
    for c in range(num_classes):
        total = Z_flat.new_zeros(d)
        for n in range(len(flat)):
            if int(flat[n]) == c:
                total = total + Z_flat[n]
                counts[c] += 1
        if counts[c] > 0:
            values[c] = total / counts[c].to(Z_flat.dtype)
    return ClassPrototypes(values=values, counts=counts, present=counts > 0,
                           domain=DomainLabel.parse(domain))


def extract_prototypes(Z, pred_classes, num_classes, domain=DomainLabel.SOURCE):
    return extract_prototypes_batched(Z, build_class_mask(pred_classes, num_classes), domain)


class PrototypeDiscriminator(nn.Module):
    """ 3-layer perceptron applied independently to every prototype vector
    (a 1x1 convolution over the class axis); outputs one domain logit per row """

    def __init__(self, d_model, hidden_dim=64):
        super(PrototypeDiscriminator, self).__init__()
        self.fc1 = nn.Linear(d_model, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, hidden_dim)
        self.fc3 = nn.Linear(hidden_dim, 1)
        self.leaky_relu = nn.LeakyReLU(negative_slope=0.2)

    def forward(self, x):
        x = self.leaky_relu(self.fc1(x))
        x = self.leaky_relu(self.fc2(x))
        return self.fc3(x).squeeze(-1)


class ImageDiscriminator(nn.Module):
    """ Patch discriminator over backbone feature maps: one domain logit
    per spatial location """

    def __init__(self, in_channels, inter_channels=64):
        super(ImageDiscriminator, self).__init__()
        self.conv1 = nn.Conv2d(in_channels, inter_channels, kernel_size=1)
        self.conv2 = nn.Conv2d(inter_channels, inter_channels, kernel_size=1)
        self.classifier = nn.Conv2d(inter_channels, 1, kernel_size=1)
        self.leaky_relu = nn.LeakyReLU(negative_slope=0.2)

    def forward(self, x):
        x = self.leaky_relu(self.conv1(x))
        x = self.leaky_relu(self.conv2(x))
        return self.classifier(x)


def discriminator_forward(discriminator, prototypes):
    """Per-class probability that a prototype comes from the target domain.
    Rows of absent classes are computed too and must be ignored downstream.
    """
    return torch.sigmoid(discriminator(prototypes.values))


def prototype_adversarial_loss(protos_src, protos_tgt, discriminator, grl_scale=1.0):
    """Binary cross-entropy of the prototype discriminator (source d=0,
    target d=1), summed over the classes present in each domain batch.

    Only present rows are fed through the gradient reversal layer into the
    discriminator, so absent rows cannot influence the value or gradient.
    """
    src = protos_src.values[protos_src.present]
    tgt = protos_tgt.values[protos_tgt.present]
    if len(src) == 0 and len(tgt) == 0:
        return protos_src.values.sum() * 0
    # -log(1 - p) for source rows, -log(p) for target rows
    loss = protos_src.values.new_zeros(())
    if len(src):
        loss = loss + F.softplus(discriminator(grl(src, grl_scale))).sum()
    if len(tgt):
        loss = loss + F.softplus(-discriminator(grl(tgt, grl_scale))).sum()
    return loss


def backbone_adversarial_loss(features_src, features_tgt, discriminator, grl_scale=1.0):
    """Image-level alignment: per-location BCE of a patch discriminator
    behind a gradient reversal layer, averaged over every location of every
    feature scale of both domains.
    """
    if not isinstance(features_src, (list, tuple)):
        features_src, features_tgt = [features_src], [features_tgt]
    logits, labels = [], []
    for f_src, f_tgt in zip(features_src, features_tgt):
        if f_src.shape != f_tgt.shape:
            raise ValueError("Feature shapes differ: {} vs {}".format(f_src.shape, f_tgt.shape))
        src_logits = discriminator(grl(f_src, grl_scale)).flatten()
        tgt_logits = discriminator(grl(f_tgt, grl_scale)).flatten()
        logits += [src_logits, tgt_logits]
        labels += [torch.zeros_like(src_logits), torch.ones_like(tgt_logits)]
    return F.binary_cross_entropy_with_logits(torch.cat(logits), torch.cat(labels))


def filter_queries_by_confidence(Z, predictions, threshold):
    """Keeps queries whose max class score is >= threshold.

    Returns:
        (M x d embeddings, M predicted classes)
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("Confidence threshold must be in (0, 1), got {}".format(threshold))
    scores, classes = query_scores(predictions)
    keep = scores >= threshold
    return Z[keep], classes[keep]


def filter_queries_by_matching(Z, match, gt_labels):
    """Keeps only Hungarian-matched queries, labelled with their matched
    ground-truth category.

    Args:
        Z (torch.Tensor): B x N x d
        match (list): per-image (query indices, target indices)
        gt_labels (list): per-image label tensors
    """
    embeddings, classes = [], []
    for b, (query_idx, gt_idx) in enumerate(match):
        embeddings.append(Z[b, query_idx])
        classes.append(gt_labels[b][gt_idx].to(torch.long))
    if not embeddings:
        return Z.new_zeros(0, Z.shape[-1]), torch.zeros(0, dtype=torch.long)
    return torch.cat(embeddings), torch.cat(classes)


def select_prototype_queries(mode, Z, predictions, domain, confidence_threshold=0.5,
                             target_threshold=0.8, match=None, gt_labels=None):
    """Chooses which queries build the class-wise prototypes.

    'none' keeps every query with its predicted class. 'confidence' keeps
    reliable queries only. 'matching' keeps Hungarian-matched queries on the
    labeled source domain; unlabeled target batches fall back to
    confidence filtering at ``target_threshold``, standing in for
    pseudo-labels.
    """
    if mode not in FILTER_MODES:
        raise ValueError("{} is not a valid prototype filter. "
                         "Must be one of {}".format(mode, FILTER_MODES))
    if mode == 'none':
        return Z, argmax_class(predictions)
    if mode == 'confidence':
        return filter_queries_by_confidence(Z, predictions, confidence_threshold)
    if DomainLabel.parse(domain) == DomainLabel.SOURCE:
        if match is None or gt_labels is None:
            raise ValueError("Matching filter needs the match and ground-truth labels")
        return filter_queries_by_matching(Z, match, gt_labels)
    return filter_queries_by_confidence(Z, predictions, target_threshold)
