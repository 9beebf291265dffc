import pytest
import torch

from radar import ModelConfig, RingTransformer, make_schedule
from radar.synthetic import constant_source
from radar.train import TrainConfig, train_model

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(vocab_size=8, num_classes=3, dim=16, num_layers=2,
                       num_heads=2, max_grid=(4, 4), max_steps=8)


@pytest.fixture()
def tiny_model(tiny_cfg):
    model = RingTransformer(tiny_cfg)
    model.init_parameters(0)
    model.eval()
    return model


@pytest.fixture(scope="session")
def sanity_setup():
    """Model trained on the constant-grid source: every class is one flat grid."""
    cfg = ModelConfig(vocab_size=16, num_classes=4, dim=32, num_layers=2,
                      num_heads=2, max_grid=(8, 8), max_steps=16)
    model = RingTransformer(cfg)
    model.init_parameters(0)
    src = constant_source(16, 8, 8, 4)
    sched = make_schedule(8, 8, "center", 1)
    tc = TrainConfig(lr=1e-2, epochs=3, batch_size=8, grids_per_epoch=512, seed=0)
    history = train_model(model, src, tc, sched)
    model.eval()
    return model, src, sched, history
