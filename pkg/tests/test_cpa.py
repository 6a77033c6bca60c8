# coding: utf-8

import math
import time
from collections import Counter

import numpy as np
import pytest
import torch

from datr.cpa import (DomainLabel, ImageDiscriminator, PrototypeDiscriminator, backbone_adversarial_loss,
                      build_class_mask, discriminator_forward, extract_prototypes,
                      extract_prototypes_batched, extract_prototypes_naive, filter_queries_by_confidence,
                      filter_queries_by_matching, grl, prototype_adversarial_loss, select_prototype_queries)
from datr.detector import Predictions


def _zero_last_layer(discriminator):
    last = discriminator.fc3 if hasattr(discriminator, 'fc3') else discriminator.classifier
    torch.nn.init.zeros_(last.weight)
    torch.nn.init.zeros_(last.bias)
    return discriminator


def test_class_mask():
    mask = build_class_mask(torch.tensor([[0, 2]]), 3)
    assert mask.tolist() == [[1, 0, 0], [0, 0, 1]]
    with pytest.raises(ValueError):
        build_class_mask(torch.tensor([[0, 3]]), 3)


def test_class_mask_column_sums_are_histogram():
    rng = np.random.default_rng(0)
    classes = torch.from_numpy(rng.integers(0, 5, size=(3, 9)))
    mask = build_class_mask(classes, 5)
    assert mask.sum(0).tolist() == np.bincount(classes.flatten().numpy(), minlength=5).tolist()


def test_two_point_mean():
    Z = torch.tensor([[[1.0, 0.0], [3.0, 0.0]]])
    protos = extract_prototypes(Z, torch.tensor([[0, 0]]), 3)
    assert protos.values[0].tolist() == [2.0, 0.0]
    assert protos.counts.tolist() == [2, 0, 0]
    assert protos.present.tolist() == [True, False, False]
    assert protos.values[1:].abs().sum() == 0


def test_single_query_per_class_is_verbatim():
    Z = torch.randn(1, 3, 4)
    protos = extract_prototypes(Z, torch.tensor([[2, 0, 1]]), 3)
    assert torch.equal(protos.values[2], Z[0, 0])
    assert torch.equal(protos.values[0], Z[0, 1])


def test_batched_matches_naive_oracle():
    rng = np.random.default_rng(0)
    start = time.time()
    for _ in range(1000):
        B, N, d, C = rng.integers(1, 5), rng.integers(1, 33), rng.integers(1, 65), rng.integers(1, 9)
        Z = torch.from_numpy(rng.standard_normal((B, N, d)).astype(np.float32))
        classes = torch.from_numpy(rng.integers(0, C, size=(B, N)))
        batched = extract_prototypes(Z, classes, C)
        naive = extract_prototypes_naive(Z, classes, C)
        assert (batched.values - naive.values).abs().max() < 1e-5
        assert torch.equal(batched.counts, naive.counts)
        assert torch.equal(batched.present, naive.present)
    assert time.time() - start < 30


def test_prototypes_ignore_query_order():
    rng = np.random.default_rng(3)
    for _ in range(20):
        B, N, d, C = rng.integers(1, 4), rng.integers(2, 17), rng.integers(1, 33), rng.integers(1, 7)
        Z = torch.from_numpy(rng.standard_normal((B, N, d)).astype(np.float32))
        classes = torch.from_numpy(rng.integers(0, C, size=(B, N)))
        order = torch.from_numpy(rng.permutation(int(N)))
        shuffled = extract_prototypes(Z[:, order], classes[:, order], C)
        reference = extract_prototypes(Z, classes, C)
        assert torch.allclose(shuffled.values, reference.values, atol=1e-6)
        assert torch.equal(shuffled.counts, reference.counts)


def test_prototype_counts_cover_every_query():
    rng = np.random.default_rng(4)
    for B, N, C in [(1, 1, 1), (2, 6, 3), (4, 30, 8)]:
        Z = torch.from_numpy(rng.standard_normal((B, N, 5)))
        classes = torch.from_numpy(rng.integers(0, C, size=(B, N)))
        protos = extract_prototypes(Z, classes, C)
        assert int(protos.counts.sum()) == B * N
        assert torch.equal(protos.present, protos.counts > 0)


def test_single_image_restriction():
    torch.manual_seed(0)
    Z = torch.randn(2, 4, 3)
    classes = torch.tensor([[0, 1, 1, 0], [2, 2, 0, 2]])
    batch = extract_prototypes(Z, classes, 3)
    single = extract_prototypes(Z[:1], classes[:1], 3)
    # class 1 only occurs in the first image
    assert torch.allclose(batch.values[1], single.values[1])
    assert not torch.allclose(batch.values[0], single.values[0])


def test_grl_identity_and_sign():
    x = torch.tensor([1.5, -2.0], requires_grad=True)
    y = grl(x)
    assert y.tolist() == [1.5, -2.0]
    y.sum().backward()
    assert x.grad.tolist() == [-1.0, -1.0]


def test_discriminator_contract():
    disc = _zero_last_layer(PrototypeDiscriminator(8)).eval()
    protos = extract_prototypes(torch.randn(1, 5, 8), torch.tensor([[0, 1, 1, 2, 0]]), 3)
    assert torch.allclose(discriminator_forward(disc, protos), torch.full((3,), 0.5))

    disc = PrototypeDiscriminator(8).eval()
    p = discriminator_forward(disc, protos)
    assert ((p > 0) & (p < 1)).all()
    assert torch.equal(p, discriminator_forward(disc, protos))


def test_adversarial_loss_plug_in_value():
    disc = _zero_last_layer(PrototypeDiscriminator(4))
    src = extract_prototypes(torch.randn(1, 2, 4), torch.tensor([[1, 1]]), 3, DomainLabel.SOURCE)
    tgt = extract_prototypes(torch.randn(1, 2, 4), torch.tensor([[2, 2]]), 3, DomainLabel.TARGET)
    loss = prototype_adversarial_loss(src, tgt, disc)
    assert abs(loss.item() - 2 * math.log(2)) < 1e-6


def test_adversarial_loss_perfect_discriminator():
    class Oracle(torch.nn.Module):
        def forward(self, x):
            return x[:, 0] * 50

    src = extract_prototypes(torch.tensor([[[-1.0, 0.0]]]), torch.tensor([[0]]), 2)
    tgt = extract_prototypes(torch.tensor([[[1.0, 0.0]]]), torch.tensor([[1]]), 2)
    assert prototype_adversarial_loss(src, tgt, Oracle()).item() < 1e-12


def test_absent_rows_do_not_change_losses():
    torch.manual_seed(0)
    disc = PrototypeDiscriminator(6)
    src = extract_prototypes(torch.randn(2, 5, 6), torch.randint(0, 2, (2, 5)), 4)
    tgt = extract_prototypes(torch.randn(2, 5, 6), torch.randint(1, 3, (2, 5)), 4)
    reference = prototype_adversarial_loss(src, tgt, disc)

    src.values = src.values.clone()
    tgt.values = tgt.values.clone()
    src.values[~src.present] = 1e6
    tgt.values[~tgt.present] = -7.5
    assert prototype_adversarial_loss(src, tgt, disc).item() == reference.item()


def test_reversed_gradient_is_negated():
    torch.manual_seed(0)
    disc = PrototypeDiscriminator(5).double()
    Z_src = torch.randn(1, 6, 5, dtype=torch.float64, requires_grad=True)
    Z_tgt = torch.randn(1, 6, 5, dtype=torch.float64, requires_grad=True)
    classes = torch.tensor([[0, 1, 2, 0, 1, 2]])

    def grads(reversed_path):
        src = extract_prototypes(Z_src, classes, 3)
        tgt = extract_prototypes(Z_tgt, classes, 3, DomainLabel.TARGET)
        if reversed_path:
            loss = prototype_adversarial_loss(src, tgt, disc)
        else:
            loss = (torch.nn.functional.softplus(disc(src.values)).sum()
                    + torch.nn.functional.softplus(-disc(tgt.values)).sum())
        return torch.autograd.grad(loss, (Z_src, Z_tgt))

    for with_grl, without in zip(grads(True), grads(False)):
        assert torch.allclose(with_grl, -without, rtol=1e-6, atol=0)


def test_full_path_central_differences():
    torch.manual_seed(1)
    disc = PrototypeDiscriminator(3).double()
    Z = torch.randn(1, 4, 3, dtype=torch.float64, requires_grad=True)
    tgt = extract_prototypes(torch.randn(1, 4, 3, dtype=torch.float64), torch.tensor([[0, 1, 1, 0]]), 2)
    classes = torch.tensor([[0, 0, 1, 1]])

    def loss_of(z):
        return prototype_adversarial_loss(extract_prototypes(z, classes, 2), tgt, disc)

    analytic, = torch.autograd.grad(loss_of(Z), Z)
    eps = 1e-6
    with torch.no_grad():
        for idx in np.ndindex(*Z.shape):
            plus, minus = Z.clone(), Z.clone()
            plus[idx] += eps
            minus[idx] -= eps
            numeric = (loss_of(plus) - loss_of(minus)).item() / (2 * eps)
            # the reversal layer flips the sign of the propagated gradient
            assert abs(-numeric - analytic[idx].item()) <= 1e-3 * max(abs(numeric), 1e-8)


def test_discriminator_gradcheck():
    disc = PrototypeDiscriminator(3, hidden_dim=4).double()
    x = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(disc, (x,))


def test_backbone_loss_values():
    disc = _zero_last_layer(ImageDiscriminator(8))
    features = [torch.randn(2, 8, 4, 4), torch.randn(2, 8, 2, 2)]
    loss = backbone_adversarial_loss(features, [f + 1 for f in features], disc)
    assert abs(loss.item() - math.log(2)) < 1e-6

    disc = ImageDiscriminator(8)
    assert backbone_adversarial_loss(features, [f * 3 for f in features], disc).item() >= 0
    with pytest.raises(ValueError):
        backbone_adversarial_loss([features[0]], [features[1]], disc)


def test_backbone_loss_reverses_gradient():
    torch.manual_seed(0)
    disc = ImageDiscriminator(4).double()
    f_src = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    f_tgt = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    with_grl, = torch.autograd.grad(backbone_adversarial_loss([f_src], [f_tgt], disc), f_src)
    logits = torch.cat([disc(f_src).flatten(), disc(f_tgt).flatten()])
    labels = torch.cat([torch.zeros(9), torch.ones(9)]).double()
    without, = torch.autograd.grad(torch.nn.functional.binary_cross_entropy_with_logits(logits, labels), f_src)
    assert torch.allclose(with_grl, -without, rtol=1e-6, atol=0)


def _predictions_with_scores(scores, n_classes=3):
    scores = torch.as_tensor(scores, dtype=torch.float64)
    logits = torch.full((*scores.shape, n_classes), -20.0, dtype=torch.float64)
    logits[..., 1] = torch.logit(scores)
    return Predictions(logits, torch.full((*scores.shape, 4), 0.5))


def test_confidence_filter():
    Z = torch.arange(4.0).reshape(1, 2, 2)
    kept, classes = filter_queries_by_confidence(Z, _predictions_with_scores([[0.4, 0.6]]), 0.5)
    assert kept.tolist() == [[2.0, 3.0]]
    assert classes.tolist() == [1]

    kept, _ = filter_queries_by_confidence(Z, _predictions_with_scores([[0.4, 0.6]]), 1e-9)
    assert torch.equal(kept, Z.reshape(-1, 2))
    with pytest.raises(ValueError):
        filter_queries_by_confidence(Z, _predictions_with_scores([[0.4, 0.6]]), 1.5)


def test_filtered_prototype_equals_mean_of_survivors():
    torch.manual_seed(0)
    Z = torch.randn(2, 5, 3, dtype=torch.float64)
    scores = torch.rand(2, 5, dtype=torch.float64) * 0.8 + 0.1
    kept, classes = filter_queries_by_confidence(Z, _predictions_with_scores(scores), 0.5)
    protos = extract_prototypes(kept, classes, 3)
    survivors = [Z[b, n] for b in range(2) for n in range(5) if scores[b, n] >= 0.5]
    if survivors:
        assert torch.allclose(protos.values[1], torch.stack(survivors).mean(0))
    assert protos.counts[1].item() == len(survivors)


def test_matching_filter():
    Z = torch.randn(1, 20, 4)
    gt_labels = [torch.tensor([3, 1, 3])]
    match = [(torch.tensor([7, 2, 15]), torch.tensor([0, 2, 1]))]
    kept, classes = filter_queries_by_matching(Z, match, gt_labels)
    assert len(kept) == 3
    assert Counter(classes.tolist()) == Counter(gt_labels[0].tolist())
    assert torch.equal(kept[0], Z[0, 7])

    empty = [(torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long))]
    kept, classes = filter_queries_by_matching(Z, empty, [torch.zeros(0, dtype=torch.long)])
    assert len(kept) == 0 and len(classes) == 0


def test_select_prototype_queries_dispatch():
    Z = torch.randn(1, 3, 2)
    predictions = _predictions_with_scores([[0.3, 0.6, 0.9]])
    kept, _ = select_prototype_queries('none', Z, predictions, 'source')
    assert len(kept) == 3
    kept, _ = select_prototype_queries('matching', Z, predictions, 'target', target_threshold=0.8)
    assert len(kept) == 1
    with pytest.raises(ValueError):
        select_prototype_queries('matching', Z, predictions, 'source')
    with pytest.raises(ValueError):
        select_prototype_queries('top-k', Z, predictions, 'source')
