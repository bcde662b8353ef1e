import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def toy_trained_c4():
    """A briefly-trained small C_4 model; training makes the repeatability
    maps peaky enough for dense keypoint extraction."""
    from rotfeat.network import NetConfig
    from rotfeat.training import TrainConfig, train

    cfg = TrainConfig(net=NetConfig(group_order=4, channels=(8, 16, 16, 32, 32), head_width=8),
                      image_size=64, ap_samples=16)
    model, _ = train(cfg, steps=40, seed=0)
    return model
