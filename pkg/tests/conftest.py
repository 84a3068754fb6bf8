import pytest
import torch

from rccyclegan.config import TrainConfig, load_config
from rccyclegan.data import TrainingSet, synthetic_pairs
from pathlib import Path

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


@pytest.fixture
def tiny_cfg():
    """Smallest network that still exercises every layer type."""
    return TrainConfig(image_size=16, epochs=4, ngf=4, ndf=4, rmi_channels=4, n_rmi=2,
                       n_res_blocks=1, seed=3)


@pytest.fixture
def desk_cfg():
    return load_config(DESK_CONFIG)


@pytest.fixture
def toy_data():
    return TrainingSet.from_samples(synthetic_pairs(4, 16, seed=5))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
