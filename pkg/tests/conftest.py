import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from polyscore.encoder import ModelConfig, TransformerWeights
from polyscore.text import Vocabulary


def make_rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture
def rng():
    return make_rng(0)


@pytest.fixture
def tiny_vocab():
    return Vocabulary([f"w{i}" for i in range(28)])


@pytest.fixture
def desk_config(tiny_vocab):
    return ModelConfig(vocab_size=len(tiny_vocab))


@pytest.fixture
def desk_weights(desk_config):
    return TransformerWeights.init(desk_config, make_rng(7))
