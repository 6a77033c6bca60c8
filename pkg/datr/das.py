"""
Dataset-level alignment: a memory of class prototypes shared by both
domains, kept as the exact running mean of every query embedding folded
into it, and a contrastive loss pulling each batch prototype toward the
memory row of its own class and away from the other classes.
"""
import os
import logging

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


logger = logging.getLogger(__name__)

MEMORY_FORMAT_VERSION = 1


@dataclass
class DatasetPrototypes:
    values: torch.Tensor
    counts: torch.Tensor

    @classmethod
    def empty(cls, num_classes, d_model):
        return cls(values=torch.zeros(num_classes, d_model, dtype=torch.float64),
                   counts=torch.zeros(num_classes, dtype=torch.int64))

    @property
    def present(self):
        return self.counts > 0

    def copy(self):
        return DatasetPrototypes(values=self.values.clone(), counts=self.counts.clone())

    def __eq__(self, other):
        return (isinstance(other, DatasetPrototypes)
                and torch.equal(self.values, other.values)
                and torch.equal(self.counts, other.counts))


def memory_update(mem, batch):
    """Folds a batch of class prototypes into the memory as a count-weighted
    mean. Runs outside the autograd graph; returns a new memory.
    """
    if mem.values.shape != batch.values.shape:
        raise ValueError("Memory shape {} does not match prototypes {}".format(
            tuple(mem.values.shape), tuple(batch.values.shape)))
    batch_counts = batch.counts.detach().to(torch.int64).cpu()
    if (batch_counts < 0).any() or (mem.counts < 0).any():
        raise ValueError("Prototype counts must be non-negative")

    with torch.no_grad():
        values = mem.values.clone()
        counts = mem.counts.clone()
        rows = batch_counts > 0
        if rows.any():
            n_new = batch_counts[rows].to(torch.float64).unsqueeze(1)
            n_old = counts[rows].to(torch.float64).unsqueeze(1)
            p_new = batch.values.detach().cpu().to(torch.float64)[rows]
            values[rows] = (p_new * n_new + values[rows] * n_old) / (n_new + n_old)
            counts[rows] += batch_counts[rows]
    return DatasetPrototypes(values=values, counts=counts)


def _domain_contrast(protos, mem, temperature=None):
    """Mean over A of -log softmax_i, A = classes present in batch and memory."""
    active = protos.present.cpu() & mem.present
    if int(active.sum()) == 0:
        return protos.values.new_zeros(())
    idx = torch.nonzero(active).flatten().to(protos.values.device)
    batch = protos.values[idx]
    memory = mem.values.to(device=batch.device, dtype=batch.dtype)[idx].detach()
    # logits[i, j] = P_j . ~P_i, the positive pair sits on the diagonal
    logits = memory @ batch.t()
    if temperature:
        logits = logits / temperature
    return F.cross_entropy(logits, torch.arange(len(idx), device=logits.device))


def contrastive_loss(protos_src, protos_tgt, mem, temperature=None):
    """Cross-domain contrastive loss between batch prototypes of each domain
    and the dataset-level memory. The memory is a constant of the graph.
    """
    return _domain_contrast(protos_src, mem, temperature) + _domain_contrast(protos_tgt, mem, temperature)


def memory_persist(mem, path):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'wb') as f:
            np.savez(f, version=np.int64(MEMORY_FORMAT_VERSION),
                     shape=np.array(mem.values.shape, dtype=np.int64),
                     counts=mem.counts.numpy().astype(np.int64),
                     values=mem.values.numpy().astype(np.float64))
    except OSError as e:
        raise OSError("Could not write prototype memory to {}: {}".format(path, e)) from e


def memory_restore(path):
    if not os.path.exists(path):
        raise FileNotFoundError("Prototype memory not found: {}".format(path))
    try:
        with np.load(path, allow_pickle=False) as blob:
            version = int(blob['version'])
            shape = tuple(int(s) for s in blob['shape'])
            counts = blob['counts'].astype(np.int64)
            values = blob['values'].astype(np.float64)
    except (ValueError, OSError, KeyError, EOFError) as e:
        raise ValueError("Unreadable prototype memory {}: {}".format(path, e)) from e
    if version != MEMORY_FORMAT_VERSION:
        raise ValueError("Prototype memory {} has version {}, expected {}".format(
            path, version, MEMORY_FORMAT_VERSION))
    if values.shape != shape or counts.shape != shape[:1]:
        raise ValueError("Prototype memory {} is inconsistent: values {} counts {} declared {}".format(
            path, values.shape, counts.shape, shape))
    return DatasetPrototypes(values=torch.from_numpy(values), counts=torch.from_numpy(counts))
