import pytest
import torch

from cpcad.dataset import SynthDefectConfig, generate_synthetic
from cpcad.encoder import EncoderConfig
from cpcad.geometry import GridSpec
from cpcad.trainer import TrainConfig, train_class

torch.set_num_threads(max(1, torch.get_num_threads()))

DESK_GRID = GridSpec(128, 64, 32, 32, 16)
DESK_ENCODER = EncoderConfig("small-cnn", 64, 32)


@pytest.fixture(scope="session")
def desk_split():
    cfg = SynthDefectConfig(seed=7, n_train=20, n_test_normal=4, n_test_anomalous=4)
    return generate_synthetic(cfg, 128)


@pytest.fixture(scope="session")
def desk_loss_log():
    return []


@pytest.fixture(scope="session")
def desk_bundle(desk_split, desk_loss_log):
    """Small trained model shared across trainer/scoring tests: 20 training
    images, 5 epochs, all four directions."""
    cfg = TrainConfig(epochs=5, batch_size=16, n_negatives=16, offsets=(2,), seed=0)
    return train_class(
        desk_split, DESK_GRID, DESK_ENCODER, cfg, loss_log=desk_loss_log
    )
