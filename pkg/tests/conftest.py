import pytest
import torch

from phinet_core.config import LossFlags, TrainConfig, model_preset
from phinet_core.gradcheck import randomize_parameters
from phinet_core.log_utils import configurate_logger
from phinet_core.objective import build_model
from phinet_core.videodata import generate_dataset


@pytest.fixture(autouse=True)
def quiet_loggers():
    """Every test starts with a terminal logger and a file logger that drops events."""
    configurate_logger(log_path=None)
    yield
    configurate_logger(log_path=None)


@pytest.fixture
def micro_cfg():
    return model_preset("micro")


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def micro_model(micro_cfg, generator):
    """Micro PhiNet in 64-bit with parameters moved away from their initialization."""
    model = build_model(micro_cfg, LossFlags(), torch.float64)
    randomize_parameters(model, generator)
    return model


@pytest.fixture
def micro_frames(micro_cfg, generator):
    shape = (3, micro_cfg.channels, micro_cfg.image_size, micro_cfg.image_size)
    return (
        torch.randn(shape, generator=generator, dtype=torch.float64),
        torch.randn(shape, generator=generator, dtype=torch.float64),
    )


@pytest.fixture
def micro_videos():
    """Four short 8x8 videos matching the micro model."""
    return generate_dataset(n_videos=4, n_frames=12, image_size=8, seed=0)


@pytest.fixture
def micro_train_config():
    return TrainConfig(
        lr=1e-3,
        warmup_epochs=1,
        total_epochs=2,
        batch_size=4,
        k_min=1,
        k_max=4,
        float64=True,
        seed=0,
    )
