import logging

import torch.nn as nn

from datr.cpa import ImageDiscriminator, PrototypeDiscriminator
from datr.detector import DEFAULT_DETECTOR_CONFIG, MiniDetr
from datr.utils import dotdict


logger = logging.getLogger(__name__)


class DomainAdaptiveDetector(nn.Module):
    """ Detector plus the domain discriminators used for alignment.

    Student and teacher are both instances of this class, so they share one
    parameter name set, discriminators included.
    """

    def __init__(self, cfg=DEFAULT_DETECTOR_CONFIG, discriminator_hidden=64):
        super(DomainAdaptiveDetector, self).__init__()
        self.cfg = dotdict(cfg)
        self.detector = MiniDetr(self.cfg)
        self.proto_discriminator = PrototypeDiscriminator(self.cfg.d_model, discriminator_hidden)
        channels = self.detector.backbone.num_channels
        if len(set(channels)) != 1:
            raise ValueError("Backbone alignment expects equal widths on both scales, got {}".format(channels))
        self.image_discriminator = ImageDiscriminator(channels[0], discriminator_hidden)

    @property
    def n_classes(self):
        return self.detector.n_classes

    @property
    def d_model(self):
        return self.detector.d_model

    def forward(self, images):
        return self.detector(images)


def build_model(num_classes, detector_cfg=None):
    cfg = dotdict(DEFAULT_DETECTOR_CONFIG)
    cfg.update(detector_cfg or {})
    cfg.n_classes = num_classes
    model = DomainAdaptiveDetector(cfg)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info("Built detector with {} classes, {} queries, {} parameters".format(
        num_classes, cfg.n_queries, n_params))
    return model
