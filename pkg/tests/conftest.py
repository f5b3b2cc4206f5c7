import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dualres.mllm import BackboneConfig, JointSpeechTextModel, ModelConfig  # noqa: E402
from dualres.tokens import SyntheticCodec  # noqa: E402


@pytest.fixture
def codec():
    return SyntheticCodec(5, 0)


def tiny_config(seed=0, **kw) -> ModelConfig:
    base = dict(backbone=BackboneConfig(layers=2, d_h=8, heads=2, max_frames=16), k=5, d_s=2, d_g=10,
                srh_layers=1, srh_heads=1, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return JointSpeechTextModel(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# a pipeline config small enough to run every stage in a few seconds
SMALL_CONFIG = """
[backbone]
layers = 1
d_h = 16
heads = 2
max_frames = 24

[model]
d_s = 4
d_g = 20
srh_heads = 1

[corpus]
kind = echo
n_train = 12
n_heldout = 4
max_len = 3

[prealign]
steps = 15
lr_start = 3e-3
lr_end = 3e-4

[cocktail1]
steps = 15
lr_start = 3e-3
lr_end = 3e-4

[cocktail2]
steps = 10
lr_start = 3e-4
lr_end = 3e-5

[dpo]
steps = 6
batch_size = 4

[duplex]
n_dialogues = 4
max_turns = 2
steps = 10
batch_size = 4
"""


@pytest.fixture
def small_cfg():
    from dualres.config import parse_config
    return parse_config(SMALL_CONFIG)


@pytest.fixture
def small_config_file(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL_CONFIG)
    return p
