# coding: utf-8

import pytest
import torch

from datr.model import build_model
from datr.self_training import TrainConfig
from datr.synthetic_domains import FOG_PRESETS, SceneSpec, build_benchmark
from datr.utils import dotdict


TINY_SPEC = SceneSpec(image_size=(32, 32), num_objects_range=(1, 2),
                      min_object_size=8, max_object_size=14)

TINY_DETECTOR = dotdict({
    'backbone_widths': (8, 16, 32, 32),
    'n_groups': 4,
    'd_model': 16,
    'n_heads': 2,
    'n_enc_layers': 1,
    'n_dec_layers': 2,
    'dim_feedforward': 32,
    'n_queries': 6,
})


@pytest.fixture(scope='session')
def tiny_benchmark(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp('fog')
    return build_benchmark(str(out_dir), n_train=4, n_val=2, seed=3, fog_preset='heavy', spec=TINY_SPEC)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return build_model(len(TINY_SPEC.shape_classes), TINY_DETECTOR)


@pytest.fixture
def tiny_config():
    return TrainConfig(burn_in_epochs=1, mutual_epochs=1, batch_size=2, lr=1e-3,
                       pseudo_threshold=0.05, eval_batch_size=2, detector=dict(TINY_DETECTOR))


@pytest.fixture
def heavy_fog():
    return FOG_PRESETS['heavy']
