import os
import hashlib
import logging

import torch

from datr.model import build_model


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def file_digest(path):
    sha = hashlib.sha1()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            sha.update(block)
    return sha.hexdigest()


def save_checkpoint(path, model, fingerprint, config, epoch, stage,
                    teacher=None, optimizer=None, scheduler=None, extra=None):
    """Writes parameters (student, optional teacher) and optimizer state
    together with the configuration fingerprint they were trained under.
    """
    state = {
        'version': CHECKPOINT_FORMAT_VERSION,
        'fingerprint': fingerprint,
        'config': config,
        'detector_cfg': dict(model.cfg),
        'n_classes': model.n_classes,
        'epoch': epoch,
        'stage': stage,
        'model': model.state_dict(),
        'teacher': teacher.state_dict() if teacher is not None else None,
        'optimizer': optimizer.state_dict() if optimizer is not None else None,
        'scheduler': scheduler.state_dict() if scheduler is not None else None,
        'extra': extra or {},
    }
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        torch.save(state, path)
    except OSError as e:
        raise OSError("Could not write checkpoint {}: {}".format(path, e)) from e
    logger.debug("Saved checkpoint {} (epoch {}, stage {})".format(path, epoch, stage))


def load_checkpoint(path, expected_fingerprint=None):
    if not os.path.exists(path):
        raise FileNotFoundError("Checkpoint not found: {}".format(path))
    try:
        state = torch.load(path, map_location='cpu', weights_only=False)
    except Exception as e:
        logger.error("Error while reading checkpoint {}".format(path))
        raise ValueError("Unreadable checkpoint {}: {}".format(path, e)) from e
    if not isinstance(state, dict) or state.get('version') != CHECKPOINT_FORMAT_VERSION:
        raise ValueError("{} is not a checkpoint of format version {}".format(
            path, CHECKPOINT_FORMAT_VERSION))
    if expected_fingerprint is not None and state['fingerprint'] != expected_fingerprint:
        raise ValueError("Checkpoint {} was trained under configuration {}, "
                         "refusing to load it for configuration {}".format(
                             path, state['fingerprint'], expected_fingerprint))
    return state


def load_model(path, use_teacher=False):
    """Rebuilds the detector stored in a checkpoint, in eval mode.

    Returns:
        (model, checkpoint state)
    """
    state = load_checkpoint(path)
    weights = state['model']
    if use_teacher:
        if state['teacher'] is None:
            raise ValueError("Checkpoint {} holds no teacher weights".format(path))
        weights = state['teacher']
    model = build_model(state['n_classes'], state['detector_cfg'])
    model.load_state_dict(weights)
    model.eval()
    return model, state
