import logging

import numpy as np
import torch

from datr.utils import derive_seed, to_tensor
from datr.synthetic_domains import load_batches


logger = logging.getLogger(__name__)


def collate(images):
    """Stacks a list of AnnotatedImage into model inputs.

    Returns:
        (torch.Tensor B x 3 x H x W, list of target dicts with 'boxes',
        'labels' and optionally 'scores')
    """
    pixels = to_tensor(np.stack([img.pixels for img in images])).permute(0, 3, 1, 2).float()
    targets = []
    for img in images:
        target = {'boxes': to_tensor(img.boxes).float(),
                  'labels': to_tensor(img.labels).long()}
        if img.scores is not None:
            target['scores'] = to_tensor(img.scores).float()
        targets.append(target)
    return pixels, targets


class DomainBatcher():

    def __init__(self, source_manifest, target_manifest, batch_size, seed=0):
        """Creates paired source/target batch iterators for training and
        single-domain iterators for evaluation.

        Both domains contribute the same number of images to every training
        step; the longer manifest is truncated to the shorter one each epoch.

        Args:
            source_manifest (DatasetManifest): labeled source training set
            target_manifest (DatasetManifest): unlabeled target training set
            batch_size (int): images per domain per step
            seed (int): base seed of the per-epoch shuffles
        """
        if source_manifest.categories != target_manifest.categories:
            raise ValueError("Source and target label spaces differ: {} vs {}".format(
                source_manifest.categories, target_manifest.categories))
        self.source_manifest = source_manifest
        self.target_manifest = target_manifest
        self.batch_size = batch_size
        self.seed = seed
        self.steps_per_epoch = min(len(source_manifest), len(target_manifest)) // batch_size
        if self.steps_per_epoch == 0:
            raise ValueError("batch size {} exceeds the smaller training set ({} images)".format(
                batch_size, min(len(source_manifest), len(target_manifest))))

    def get_training_batches(self, epoch):
        """Returns an iterator yielding ((src_images, src_targets),
        (tgt_images, tgt_targets)) pairs for one epoch.

        The shuffle depends only on (seed, epoch), so a resumed run sees
        exactly the batches an uninterrupted run would.
        """
        src = load_batches(self.source_manifest, self.batch_size,
                           shuffle_seed=derive_seed(self.seed, epoch, 0))
        tgt = load_batches(self.target_manifest, self.batch_size,
                           shuffle_seed=derive_seed(self.seed, epoch, 1))
        for step, (src_batch, tgt_batch) in enumerate(zip(src, tgt)):
            if step >= self.steps_per_epoch:
                return
            yield collate(src_batch), collate(tgt_batch)
