# conftest.py

import numpy as np
import pytest

from src.backbone import Backbone
from src.missing_sim import make_dataset
from src.models import (
    DatasetConfig,
    ExperimentConfig,
    ModelSection,
    PromptConfig,
    TrainingConfig,
)
from src.prompt_engine import PromptBank


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training comparisons")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


MICRO_TEXT = """\
[model]
d_model = 8
n_layers = 2
n_heads = 2
prompt_depth = 2
max_seq_len = 8

[prompts]
correlated_length = 2
dynamic_length = 2
common_length = 2
reduction = 4
dynamic_reduction = 4
common_reduction = 4

[experiment]
name = micro
variants = baseline, dcp
seeds = 0

[missing]
case = both
etas = 0.5

[data]
n_train = 12
n_val = 4
n_test = 8
n_classes = 2
vocab_size = 32
text_len = 4
n_patches = 3
patch_dim = 4

[training]
epochs = 1
batch_size = 4
"""


@pytest.fixture
def micro_config() -> ExperimentConfig:
    """d=8, N=2, J=2, L_p=6: small enough for finite differences."""
    return ExperimentConfig(
        model=ModelSection(d_model=8, n_layers=2, n_heads=2, prompt_depth=2, max_seq_len=8),
        prompts=PromptConfig(
            correlated_length=2, dynamic_length=2, common_length=2,
            reduction=4, dynamic_reduction=4, common_reduction=4,
        ),
        data=DatasetConfig(
            n_train=12, n_val=4, n_test=8, n_classes=2,
            vocab_size=32, text_len=4, n_patches=3, patch_dim=4,
        ),
        training=TrainingConfig(epochs=1, batch_size=4),
    )


@pytest.fixture
def micro_config_file(tmp_path):
    path = tmp_path / "micro.cfg"
    path.write_text(MICRO_TEXT, encoding="utf-8")
    return path


@pytest.fixture
def encoder(micro_config):
    return micro_config.encoder_config()


@pytest.fixture
def backbone(micro_config, encoder) -> Backbone:
    return Backbone(encoder, n_outputs=micro_config.data.n_classes, seed=0)


@pytest.fixture
def bank(micro_config, encoder) -> PromptBank:
    return PromptBank(micro_config.prompts, encoder, seed=0)


@pytest.fixture
def samples(micro_config):
    data = micro_config.data
    return make_dataset(
        10, data.n_classes, 0.2, seed=0,
        vocab_size=data.vocab_size, text_len=data.text_len,
        n_patches=data.n_patches, patch_dim=data.patch_dim,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
