# coding: utf-8

import torch

from datr.criterion import SetCriterion, detection_loss, sigmoid_focal_loss
from datr.detector import Predictions


def _targets():
    return [{'labels': torch.tensor([0, 2]),
             'boxes': torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]], dtype=torch.float64)}]


def test_exact_boxes_give_zero_box_terms():
    targets = _targets()
    boxes = torch.full((1, 4, 4), 0.5, dtype=torch.float64)
    boxes[0, 1] = targets[0]['boxes'][0]
    boxes[0, 3] = targets[0]['boxes'][1]
    match = [(torch.tensor([1, 3]), torch.tensor([0, 1]))]
    loss = detection_loss(Predictions(torch.zeros(1, 4, 3, dtype=torch.float64), boxes), targets, match)
    assert loss['box_l1'].item() == 0.0
    assert abs(loss['box_giou'].item()) < 1e-12
    assert loss['classification'].item() > 0


def test_empty_ground_truth():
    empty = [{'labels': torch.zeros(0, dtype=torch.long), 'boxes': torch.zeros(0, 4)}]
    match = [(torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long))]
    logits = torch.zeros(1, 5, 3, requires_grad=True)
    boxes = torch.full((1, 5, 4), 0.5, requires_grad=True)
    loss = detection_loss(Predictions(logits, boxes), empty, match)
    assert loss['box_l1'].item() == 0.0 and loss['box_giou'].item() == 0.0
    assert loss['classification'].item() > 0

    confident_background = detection_loss(Predictions(torch.full((1, 5, 3), -30.0), boxes), empty, match)
    assert confident_background['classification'].item() < 1e-6


def test_focal_loss_downweights_easy_negatives():
    targets = torch.zeros(1, 4)
    easy = sigmoid_focal_loss(torch.full((1, 4), -5.0), targets, 1.0)
    hard = sigmoid_focal_loss(torch.full((1, 4), 2.0), targets, 1.0)
    assert easy < hard
    assert torch.isclose(sigmoid_focal_loss(torch.full((1, 4), 2.0), targets, 2.0), hard / 2)


def test_box_gradient_matches_finite_differences():
    torch.manual_seed(0)
    targets = _targets()
    logits = torch.randn(1, 4, 3, dtype=torch.float64)
    raw = torch.randn(1, 4, 4, dtype=torch.float64, requires_grad=True)
    match = [(torch.tensor([1, 3]), torch.tensor([0, 1]))]
    criterion = SetCriterion(aux_loss=False)

    def total(raw_boxes):
        outputs = {'pred_logits': logits, 'pred_boxes': raw_boxes.sigmoid()}
        return criterion(outputs, targets, match=match)[0]

    total(raw).backward()
    analytic = raw.grad.clone()
    eps = 1e-6
    for idx in [(0, 1, 0), (0, 1, 3), (0, 3, 2)]:
        with torch.no_grad():
            plus, minus = raw.clone(), raw.clone()
            plus[idx] += eps
            minus[idx] -= eps
            numeric = (total(plus) - total(minus)).item() / (2 * eps)
        assert abs(numeric - analytic[idx].item()) <= 1e-3 * max(abs(numeric), 1e-8)


def test_set_criterion_adds_auxiliary_losses():
    torch.manual_seed(0)
    outputs = {'pred_logits': torch.randn(1, 4, 3), 'pred_boxes': torch.rand(1, 4, 4) * 0.5 + 0.25}
    outputs['aux_outputs'] = [{'pred_logits': outputs['pred_logits'], 'pred_boxes': outputs['pred_boxes']}]
    targets = [{'labels': torch.tensor([1]), 'boxes': torch.tensor([[0.5, 0.5, 0.2, 0.2]])}]
    with_aux, components, match = SetCriterion(aux_loss=True)(outputs, targets)
    without_aux, _, _ = SetCriterion(aux_loss=False)(outputs, targets)
    assert torch.isclose(with_aux, 2 * without_aux)
    assert set(components) == {'classification', 'box_l1', 'box_giou'}
    assert len(match[0][0]) == 1
