# coding: utf-8

import math

import numpy as np
import pytest
import torch

from datr.cpa import ClassPrototypes, DomainLabel, extract_prototypes
from datr.das import DatasetPrototypes, contrastive_loss, memory_persist, memory_restore, memory_update


def _protos(values, counts, domain=DomainLabel.SOURCE):
    values = torch.as_tensor(values, dtype=torch.float64)
    counts = torch.as_tensor(counts, dtype=torch.long)
    return ClassPrototypes(values=values, counts=counts, present=counts > 0, domain=domain)


def _memory(values, counts):
    return DatasetPrototypes(values=torch.as_tensor(values, dtype=torch.float64),
                             counts=torch.as_tensor(counts, dtype=torch.int64))


def test_first_update_copies_prototype():
    mem = memory_update(DatasetPrototypes.empty(3, 2), _protos([[0, 0], [1, 2], [0, 0]], [0, 3, 0]))
    assert mem.values[1].tolist() == [1.0, 2.0]
    assert mem.counts.tolist() == [0, 3, 0]


def test_absent_class_row_unchanged():
    mem = _memory([[1, 1], [2, 2]], [4, 5])
    updated = memory_update(mem, _protos([[9, 9], [7, 7]], [0, 5]))
    assert updated.values[0].tolist() == [1.0, 1.0]
    assert updated.counts[0].item() == 4
    assert updated.values[1].tolist() == [4.5, 4.5]
    # inputs are not modified
    assert mem.values[1].tolist() == [2.0, 2.0]


def test_update_rejects_bad_input():
    with pytest.raises(ValueError):
        memory_update(DatasetPrototypes.empty(3, 2), _protos([[0, 0], [1, 2]], [0, 3]))
    with pytest.raises(ValueError):
        memory_update(DatasetPrototypes.empty(2, 2), _protos([[0, 0], [1, 2]], [0, -1]))


def test_memory_is_exact_running_mean():
    rng = np.random.default_rng(0)
    C, d = 5, 8
    mem = DatasetPrototypes.empty(C, d)
    seen = [[] for _ in range(C)]
    for step in range(200):
        n = int(rng.integers(1, 12))
        Z = rng.standard_normal((1, n, d))
        classes = rng.integers(0, C, size=(1, n))
        domain = DomainLabel.SOURCE if step % 2 else DomainLabel.TARGET
        mem = memory_update(mem, extract_prototypes(torch.from_numpy(Z), torch.from_numpy(classes), C, domain))
        for z, c in zip(Z[0], classes[0]):
            seen[c].append(z)

    for c in range(C):
        flat_mean = np.mean(seen[c], axis=0)
        assert mem.counts[c].item() == len(seen[c])
        rel = np.abs(mem.values[c].numpy() - flat_mean).max() / np.abs(flat_mean).max()
        assert rel < 1e-6


def test_memory_update_order_is_irrelevant():
    rng = np.random.default_rng(1)
    C, d = 4, 6
    batches = [_protos(rng.standard_normal((C, d)), rng.integers(0, 4, size=C)) for _ in range(12)]
    forward = DatasetPrototypes.empty(C, d)
    for protos in batches:
        forward = memory_update(forward, protos)
    shuffled = DatasetPrototypes.empty(C, d)
    for i in rng.permutation(len(batches)):
        shuffled = memory_update(shuffled, batches[i])
    assert torch.equal(forward.counts, shuffled.counts)
    assert (forward.values - shuffled.values).abs().max() < 1e-5


def test_memory_receives_no_gradient():
    Z = torch.randn(1, 3, 4, requires_grad=True)
    mem = memory_update(DatasetPrototypes.empty(2, 4), extract_prototypes(Z, torch.tensor([[0, 1, 1]]), 2))
    assert not mem.values.requires_grad


def test_contrast_single_present_class_is_zero():
    mem = _memory([[1.0, 2.0], [0.0, 0.0]], [3, 0])
    src = _protos([[0.5, -1.0], [0.0, 0.0]], [2, 0])
    tgt = _protos([[2.0, 1.0], [4.0, 4.0]], [1, 1])
    assert contrastive_loss(src, tgt, mem).item() == 0.0


def test_contrast_uniform_similarity():
    row = [0.3, -0.2, 0.5]
    mem = _memory([row] * 4, [1] * 4)
    src = _protos([row] * 4, [2] * 4)
    tgt = _protos([row] * 4, [1] * 4, DomainLabel.TARGET)
    assert abs(contrastive_loss(src, tgt, mem).item() - 2 * math.log(4)) < 1e-6


def test_contrast_scalar_hand_case():
    mem = _memory([[3.0], [-3.0]], [1, 1])
    src = _protos([[2.0], [0.0]], [1, 1])
    tgt = _protos([[1.0], [1.0]], [1, 1], DomainLabel.TARGET)
    # source rows: logits [6, 0] and [-6, 0]; target rows: [3, 3] and [-3, -3]
    expected = math.log(1 + math.exp(-6)) + math.log(2)
    assert abs(contrastive_loss(src, tgt, mem).item() - expected) < 1e-6


def test_contrast_temperature_scales_logits():
    mem = _memory([[3.0], [-3.0]], [1, 1])
    src = _protos([[2.0], [0.0]], [1, 1])
    tgt = _protos([[0.0], [0.0]], [0, 0])
    assert abs(contrastive_loss(src, tgt, mem, temperature=2.0).item() - math.log(1 + math.exp(-3))) < 1e-6


def test_contrast_ignores_absent_rows():
    torch.manual_seed(0)
    mem = _memory(torch.randn(4, 3), [2, 0, 5, 1])
    src = _protos(torch.randn(4, 3), [1, 1, 0, 3])
    tgt = _protos(torch.randn(4, 3), [0, 2, 2, 2], DomainLabel.TARGET)
    reference = contrastive_loss(src, tgt, mem).item()

    mem.values[1] = 1e3
    src.values[2] = -55.0
    tgt.values[0] = 12.0
    assert contrastive_loss(src, tgt, mem).item() == reference


def test_contrast_gradient_reaches_queries():
    rng = np.random.default_rng(2)
    mem = _memory(rng.standard_normal((3, 4)), [5, 2, 7])
    Z = torch.from_numpy(rng.standard_normal((2, 6, 4))).requires_grad_(True)
    classes = torch.tensor([[0, 1, 2, 0, 1, 2], [2, 2, 1, 0, 0, 1]])
    src = extract_prototypes(Z[:1], classes[:1], 3)
    tgt = extract_prototypes(Z[1:], classes[1:], 3, DomainLabel.TARGET)
    contrastive_loss(src, tgt, mem).backward()
    assert Z.grad is not None
    assert Z.grad.abs().sum().item() > 0
    assert torch.isfinite(Z.grad).all()


def test_contrast_empty_memory_is_zero():
    src = _protos(torch.randn(2, 3), [1, 1])
    assert contrastive_loss(src, src, DatasetPrototypes.empty(2, 3)).item() == 0.0


def test_persist_restore_round_trip(tmp_path):
    mem = _memory(np.random.default_rng(0).standard_normal((4, 6)), [0, 7, 2**40, 3])
    path = str(tmp_path / 'memory.bin')
    memory_persist(mem, path)
    restored = memory_restore(path)
    assert restored == mem
    assert restored.counts.dtype == torch.int64
    assert restored.counts[2].item() == 2**40


def test_restore_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        memory_restore(str(tmp_path / 'missing.bin'))

    empty = tmp_path / 'empty.bin'
    empty.write_bytes(b'')
    with pytest.raises(ValueError):
        memory_restore(str(empty))

    stale = tmp_path / 'stale.bin'
    with open(stale, 'wb') as f:
        np.savez(f, version=np.int64(99), shape=np.array([1, 1]), counts=np.zeros(1, dtype=np.int64),
                 values=np.zeros((1, 1)))
    with pytest.raises(ValueError, match='version'):
        memory_restore(str(stale))
