"""
Two-stage training: a Burn-In stage on labeled source images plus the
alignment losses, then Teacher-Student Mutual Learning in which an EMA
teacher labels the target images for the student.
"""
import os
import copy
import json
import time
import hashlib
import logging

from collections import defaultdict, namedtuple
from dataclasses import dataclass, field, asdict, fields, replace
from typing import List, Optional

import numpy as np
import torch
from torch.nn.utils import clip_grad_norm_
from tqdm import tqdm

from datr.cpa import (FILTER_MODES, backbone_adversarial_loss, extract_prototypes,
                      prototype_adversarial_loss, select_prototype_queries)
from datr.criterion import SetCriterion
from datr.das import DatasetPrototypes, contrastive_loss, memory_persist, memory_restore, memory_update
from datr.detector import as_predictions, query_scores
from datr.evaluation import evaluate_map
from datr.model import build_model
from datr.synthetic_domains import DomainLabel, augment_batch
from datr.utils import derive_seed, freeze_seeds, timeit
from datr.utils.batchers import DomainBatcher
from datr.utils.loaders import read_json
from datr.utils.mutils import load_checkpoint, save_checkpoint


logger = logging.getLogger(__name__)

STAGES = ('init', 'burn_in', 'mutual')
LOSS_KEYS = ('loss_total', 'loss_det_src', 'classification', 'box_l1', 'box_giou',
             'loss_det_tgt', 'loss_adv_proto', 'loss_adv_backbone', 'loss_contrast',
             'num_pseudo_labels')
CHECKPOINT_FILE = 'checkpoint.pt'
MEMORY_FILE = 'memory.bin'
METRICS_FILE = 'metrics.jsonl'
TIMINGS_FILE = 'timings.jsonl'


@dataclass
class TrainConfig:
    lambda_a: float = 0.1
    lambda_c: float = 0.1
    lambda_unsup: float = 1.0
    ema_alpha: float = 0.999
    pseudo_threshold: float = 0.3
    burn_in_epochs: int = 18
    mutual_epochs: int = 6
    batch_size: int = 8
    lr: float = 2e-4
    lr_decay_fraction: float = 0.8
    lr_decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    clip_max_norm: float = 0.1
    seed: int = 0
    use_backbone_align: bool = True
    use_cpa: bool = True
    use_das: bool = True
    use_self_training: bool = True
    cpa_filter: str = 'none'
    cpa_confidence_threshold: float = 0.5
    cpa_target_threshold: float = 0.8
    contrast_temperature: Optional[float] = None
    augment: bool = True
    aux_loss: bool = True
    eval_batch_size: int = 16
    eval_every: int = 1
    detector: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must be in [0, 1], got {}".format(self.ema_alpha))
        if not 0.0 < self.pseudo_threshold < 1.0:
            raise ValueError("pseudo_threshold must be in (0, 1), got {}".format(self.pseudo_threshold))
        for name in ('cpa_confidence_threshold', 'cpa_target_threshold'):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError("{} must be in (0, 1), got {}".format(name, getattr(self, name)))
        for name in ('lambda_a', 'lambda_c', 'lambda_unsup', 'lr', 'weight_decay', 'clip_max_norm'):
            if getattr(self, name) < 0:
                raise ValueError("{} must be >= 0, got {}".format(name, getattr(self, name)))
        if self.burn_in_epochs < 0 or self.mutual_epochs < 0:
            raise ValueError("Stage lengths must be >= 0: burn_in={} mutual={}".format(
                self.burn_in_epochs, self.mutual_epochs))
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if self.cpa_filter not in FILTER_MODES:
            raise ValueError("{} is not a valid cpa_filter. "
                             "Must be one of {}".format(self.cpa_filter, FILTER_MODES))
        if self.contrast_temperature is not None and self.contrast_temperature <= 0:
            raise ValueError("contrast_temperature must be > 0 when set")

    @classmethod
    def from_json(cls, path):
        raw = read_json(path)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError("Unknown configuration keys in {}: {}".format(path, unknown))
        return cls(**raw)

    def to_dict(self):
        return asdict(self)

    def override(self, **kwargs):
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def fingerprint(self):
        """Digest of every setting that shapes the trained weights."""
        settings = self.to_dict()
        settings.pop('eval_every')
        settings.pop('eval_batch_size')
        return hashlib.sha1(json.dumps(settings, sort_keys=True).encode('utf-8')).hexdigest()[:16]

    @property
    def total_epochs(self):
        return self.burn_in_epochs + self.mutual_epochs


@dataclass
class PseudoLabelSet:
    boxes: List[torch.Tensor]
    labels: List[torch.Tensor]
    scores: List[torch.Tensor]
    threshold: float

    def __post_init__(self):
        for s in self.scores:
            if len(s) and float(s.min()) < self.threshold:
                raise ValueError("Pseudo-label score below threshold {}".format(self.threshold))

    def __len__(self):
        return len(self.labels)

    def num_labels(self):
        return int(sum(len(l) for l in self.labels))

    def as_targets(self):
        return [{'boxes': b, 'labels': l, 'scores': s}
                for b, l, s in zip(self.boxes, self.labels, self.scores)]


TrainResult = namedtuple('TrainResult', 'history checkpoint memory out_dir')


@torch.no_grad()
def ema_update(teacher, student, alpha):
    """theta_t <- alpha * theta_t + (1 - alpha) * theta_s, for every named parameter."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("EMA alpha must be in [0, 1], got {}".format(alpha))
    teacher_params = dict(teacher.named_parameters())
    student_params = dict(student.named_parameters())
    if set(teacher_params) != set(student_params):
        raise ValueError("Teacher and student parameter names differ: {}".format(
            sorted(set(teacher_params) ^ set(student_params))))
    for name, t in teacher_params.items():
        t.mul_(alpha).add_(student_params[name].detach(), alpha=1.0 - alpha)
    return teacher


def clone_teacher(student):
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
        p.grad = None
    teacher.eval()
    return teacher


@torch.no_grad()
def generate_pseudo_labels(teacher, images, threshold):
    """Runs the teacher on clean target images and keeps every query whose
    max class score is >= threshold, labelled with its argmax class.
    """
    teacher.eval()
    predictions = as_predictions(teacher(images))
    scores, classes = query_scores(predictions)
    boxes, labels, kept_scores = [], [], []
    for b in range(images.shape[0]):
        keep = scores[b] >= threshold
        boxes.append(predictions.boxes[b][keep].detach())
        labels.append(classes[b][keep].detach())
        kept_scores.append(scores[b][keep].detach())
    return PseudoLabelSet(boxes=boxes, labels=labels, scores=kept_scores, threshold=threshold)


def _split_outputs(outputs, n_src):
    def split(x):
        return x[:n_src], x[n_src:]

    src, tgt = {}, {}
    src['features'], tgt['features'] = zip(*[split(f) for f in outputs['features']])
    for key in ('queries', 'pred_logits', 'pred_boxes'):
        src[key], tgt[key] = split(outputs[key])
    src['aux_outputs'], tgt['aux_outputs'] = [], []
    for aux in outputs['aux_outputs']:
        a_src, a_tgt = {}, {}
        for key in ('pred_logits', 'pred_boxes'):
            a_src[key], a_tgt[key] = split(aux[key])
        src['aux_outputs'].append(a_src)
        tgt['aux_outputs'].append(a_tgt)
    return src, tgt


def alignment_losses(model, out_src, out_tgt, src_targets, src_match, mem, config):
    """Backbone, prototype-adversarial and contrastive losses of one step.

    Disabled components are returned as exact zeros.

    Returns:
        (dict of loss tensors, source prototypes, target prototypes)
    """
    zero = out_src['queries'].new_zeros(())
    losses = {'loss_adv_backbone': zero, 'loss_adv_proto': zero, 'loss_contrast': zero}
    if out_tgt is None:
        return losses, None, None

    if config.use_backbone_align:
        losses['loss_adv_backbone'] = backbone_adversarial_loss(
            out_src['features'], out_tgt['features'], model.image_discriminator)

    if not (config.use_cpa or config.use_das):
        return losses, None, None

    prototypes = []
    for out, domain in ((out_src, DomainLabel.SOURCE), (out_tgt, DomainLabel.TARGET)):
        Z, classes = select_prototype_queries(
            config.cpa_filter, out['queries'], as_predictions(out), domain,
            confidence_threshold=config.cpa_confidence_threshold,
            target_threshold=config.cpa_target_threshold,
            match=src_match, gt_labels=[t['labels'] for t in src_targets])
        prototypes.append(extract_prototypes(Z, classes, model.n_classes, domain))
    protos_src, protos_tgt = prototypes

    if config.use_cpa:
        losses['loss_adv_proto'] = prototype_adversarial_loss(protos_src, protos_tgt, model.proto_discriminator)
    if config.use_das:
        losses['loss_contrast'] = contrastive_loss(protos_src, protos_tgt, mem, config.contrast_temperature)
    return losses, protos_src, protos_tgt


def _needs_target_forward(config, pseudo_targets):
    return (pseudo_targets is not None or config.use_backbone_align
            or config.use_cpa or config.use_das)


def _training_step(student, src_batch, tgt_batch, mem, config, optimizer, criterion,
                   generator=None, pseudo_targets=None, step_info=None):
    src_images, src_targets = src_batch
    tgt_images = tgt_batch[0]
    student.train()

    if config.augment and generator is not None:
        src_images, src_targets = augment_batch(src_images, src_targets, generator)
        # target annotations only ride along the flip, they never reach a loss
        tgt_images, tgt_targets = augment_batch(
            tgt_images, pseudo_targets if pseudo_targets is not None else tgt_batch[1], generator)
        if pseudo_targets is not None:
            pseudo_targets = tgt_targets

    if _needs_target_forward(config, pseudo_targets):
        out_src, out_tgt = _split_outputs(student(torch.cat([src_images, tgt_images])), len(src_images))
    else:
        out_src, out_tgt = student(src_images), None

    loss_det_src, components, src_match = criterion(out_src, src_targets)
    loss_det_tgt = loss_det_src.new_zeros(())
    if pseudo_targets is not None and config.lambda_unsup > 0:
        loss_det_tgt = criterion(out_tgt, pseudo_targets)[0]

    align, protos_src, protos_tgt = alignment_losses(student, out_src, out_tgt, src_targets,
                                                     src_match, mem, config)
    total = (loss_det_src
             + config.lambda_unsup * loss_det_tgt
             + config.lambda_a * (align['loss_adv_proto'] + align['loss_adv_backbone'])
             + config.lambda_c * align['loss_contrast'])

    breakdown = {'loss_total': total, 'loss_det_src': loss_det_src, 'loss_det_tgt': loss_det_tgt}
    breakdown.update(components)
    breakdown.update(align)
    breakdown = {k: float(v.detach()) for k, v in breakdown.items()}
    breakdown['num_pseudo_labels'] = float(sum(len(t['labels']) for t in pseudo_targets or []))
    if not all(np.isfinite(v) for v in breakdown.values()):
        logger.error("Non-finite loss, aborting")
        raise RuntimeError("Non-finite loss at {}: {}".format(step_info or {}, breakdown))

    optimizer.zero_grad()
    total.backward()
    if config.clip_max_norm > 0:
        clip_grad_norm_(student.parameters(), config.clip_max_norm)
    optimizer.step()

    if config.use_das and protos_src is not None:
        mem = memory_update(mem, protos_src)
        mem = memory_update(mem, protos_tgt)
    return breakdown, mem


def burn_in_step(src_batch, tgt_batch, model, mem, config, optimizer, criterion,
                 generator=None, step_info=None):
    """L = L_det(src) + lambda_a * (L_adv_proto + L_adv_backbone) + lambda_c * L_contrast

    Returns:
        (loss breakdown dict, updated memory)
    """
    if len(src_batch[0]) != len(tgt_batch[0]):
        raise ValueError("Burn-in needs equal image counts per domain: {} vs {}".format(
            len(src_batch[0]), len(tgt_batch[0])))
    return _training_step(model, src_batch, tgt_batch, mem, config, optimizer, criterion,
                          generator=generator, step_info=step_info)


def mutual_learning_step(src_batch, tgt_batch, student, teacher, mem, config, optimizer, criterion,
                         generator=None, step_info=None):
    """Burn-in objective plus lambda_unsup * L_det(tgt, teacher pseudo-labels),
    followed by an EMA update of the teacher.
    """
    if len(src_batch[0]) != len(tgt_batch[0]):
        raise ValueError("Mutual learning needs equal image counts per domain: {} vs {}".format(
            len(src_batch[0]), len(tgt_batch[0])))
    pseudo = generate_pseudo_labels(teacher, tgt_batch[0], config.pseudo_threshold)
    breakdown, mem = _training_step(student, src_batch, tgt_batch, mem, config, optimizer, criterion,
                                    generator=generator, pseudo_targets=pseudo.as_targets(),
                                    step_info=step_info)
    ema_update(teacher, student, config.ema_alpha)
    return breakdown, mem


def make_optimizer(model, config):
    return torch.optim.AdamW(model.parameters(), lr=config.lr,
                             betas=(config.beta1, config.beta2),
                             weight_decay=config.weight_decay)


def make_scheduler(optimizer, config):
    """Step decay inside burn-in only. The mutual stage restarts from ``config.lr``
    and never decays, so a schedule without burn-in keeps a constant rate.
    """
    milestones = []
    if config.burn_in_epochs > 0:
        milestones = [min(config.burn_in_epochs,
                          max(1, int(round(config.lr_decay_fraction * config.burn_in_epochs))))]
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=milestones,
                                                gamma=config.lr_decay_factor)


def _stage_of(epoch, config):
    if epoch <= config.burn_in_epochs or not config.use_self_training:
        return 'burn_in'
    return 'mutual'


def _read_history(path, up_to_epoch):
    history = []
    if os.path.exists(path):
        with open(path) as f:
            history = [json.loads(line) for line in f if line.strip()]
    return [row for row in history if row['epoch'] <= up_to_epoch]


def _write_jsonl(path, rows):
    with open(path, 'w') as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + '\n')


def _append_jsonl(path, row):
    with open(path, 'a') as f:
        f.write(json.dumps(row, sort_keys=True) + '\n')


def _eval_summary(report):
    return {'mAP': report.mAP, 'per_class_ap': report.per_class_ap}


@timeit
def train(config, benchmark, out_dir, resume=None, stop_after_epoch=None):
    """Runs burn_in_epochs of burn-in steps then mutual_epochs of mutual
    learning, writing checkpoint, memory and one metrics row per epoch.

    Args:
        config (TrainConfig): hyper-parameters
        benchmark (Benchmark): source/target train and val manifests
        out_dir (str): run directory
        resume (str, optional): checkpoint to continue from
        stop_after_epoch (int, optional): stop early (the run stays resumable)
    Returns:
        TrainResult
    """
    os.makedirs(out_dir, exist_ok=True)
    freeze_seeds(config.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)

    n_classes = benchmark.source_train.num_classes
    student = build_model(n_classes, config.detector)
    optimizer = make_optimizer(student, config)
    scheduler = make_scheduler(optimizer, config)
    criterion = SetCriterion(aux_loss=config.aux_loss)
    mem = DatasetPrototypes.empty(n_classes, student.d_model)
    teacher = None
    start_epoch = 0

    checkpoint_path = os.path.join(out_dir, CHECKPOINT_FILE)
    memory_path = os.path.join(out_dir, MEMORY_FILE)
    metrics_path = os.path.join(out_dir, METRICS_FILE)
    timings_path = os.path.join(out_dir, TIMINGS_FILE)

    def save(epoch, stage):
        save_checkpoint(checkpoint_path, student, config.fingerprint(), config.to_dict(), epoch, stage,
                        teacher=teacher, optimizer=optimizer, scheduler=scheduler)
        memory_persist(mem, memory_path)

    if resume:
        state = load_checkpoint(resume, expected_fingerprint=config.fingerprint())
        student.load_state_dict(state['model'])
        optimizer.load_state_dict(state['optimizer'])
        scheduler.load_state_dict(state['scheduler'])
        if state['teacher'] is not None:
            teacher = clone_teacher(student)
            teacher.load_state_dict(state['teacher'])
        mem = memory_restore(os.path.join(os.path.dirname(os.path.abspath(resume)), MEMORY_FILE))
        start_epoch = state['epoch']
        history = _read_history(metrics_path, start_epoch)
        _write_jsonl(metrics_path, history)
        _write_jsonl(timings_path, _read_history(timings_path, start_epoch))
        logger.info("Resumed from {} at epoch {}".format(resume, start_epoch))
    else:
        history = []
        _write_jsonl(metrics_path, history)
        _write_jsonl(timings_path, [])
        save(0, 'init')

    batcher = DomainBatcher(benchmark.source_train, benchmark.target_train, config.batch_size, config.seed)
    last_epoch = config.total_epochs if stop_after_epoch is None else min(stop_after_epoch, config.total_epochs)
    logger.info("Training epochs {}..{} ({} burn-in, {} mutual), {} steps per epoch".format(
        start_epoch + 1, last_epoch, config.burn_in_epochs, config.mutual_epochs, batcher.steps_per_epoch))

    for epoch in range(start_epoch + 1, last_epoch + 1):
        started = time.time()
        stage = _stage_of(epoch, config)
        if stage == 'mutual' and teacher is None:
            logger.info("Stage boundary: cloning teacher from student at epoch {}".format(epoch))
            teacher = clone_teacher(student)
            for group in optimizer.param_groups:
                group['lr'] = config.lr

        generator = torch.Generator().manual_seed(derive_seed(config.seed, epoch, 2))
        sums = defaultdict(float)
        n_steps = 0
        batches = tqdm(batcher.get_training_batches(epoch), total=batcher.steps_per_epoch,
                       desc="epoch {} [{}]".format(epoch, stage))
        for step, (src_batch, tgt_batch) in enumerate(batches):
            step_info = {'epoch': epoch, 'step': step, 'stage': stage}
            if stage == 'burn_in':
                breakdown, mem = burn_in_step(src_batch, tgt_batch, student, mem, config, optimizer,
                                              criterion, generator=generator, step_info=step_info)
            else:
                breakdown, mem = mutual_learning_step(src_batch, tgt_batch, student, teacher, mem, config,
                                                      optimizer, criterion, generator=generator,
                                                      step_info=step_info)
            for k, v in breakdown.items():
                sums[k] += v
            n_steps += 1
            batches.set_description("epoch {} [{}] - loss: {:.3f}".format(epoch, stage, breakdown['loss_total']))
        scheduler.step()

        row = {'epoch': epoch, 'stage': stage,
               'lr': optimizer.param_groups[0]['lr'],
               'losses': {k: sums[k] / max(n_steps, 1) for k in LOSS_KEYS}}
        if epoch % config.eval_every == 0 or epoch == config.total_epochs:
            row['target_val'] = _eval_summary(evaluate_map(student, benchmark.target_val,
                                                           batch_size=config.eval_batch_size,
                                                           fingerprint=config.fingerprint()))
            if teacher is not None:
                row['teacher_target_val'] = _eval_summary(evaluate_map(teacher, benchmark.target_val,
                                                                       batch_size=config.eval_batch_size,
                                                                       fingerprint=config.fingerprint()))
        history.append(row)
        _append_jsonl(metrics_path, row)
        _append_jsonl(timings_path, {'epoch': epoch, 'wall_time': time.time() - started})
        save(epoch, stage)
        if stage == 'burn_in' and epoch == config.burn_in_epochs:
            save_checkpoint(os.path.join(out_dir, 'burn_in.pt'), student, config.fingerprint(),
                            config.to_dict(), epoch, stage, optimizer=optimizer, scheduler=scheduler)
        logger.info("Epoch {} [{}] loss {:.4f} target mAP {}".format(
            epoch, stage, row['losses']['loss_total'],
            row.get('target_val', {}).get('mAP', 'n/a')))

    return TrainResult(history=history, checkpoint=checkpoint_path, memory=mem, out_dir=out_dir)
